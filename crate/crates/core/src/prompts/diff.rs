//! Section-structured prompt diffs that can be replayed exactly.

use serde::{Deserialize, Serialize};

use crate::reasoning::{FrozenPrinciple, KShotExample, ResolvedPrompt};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Equal,
    Insert,
    Delete,
}

/// A run of consecutive tokens sharing an op. Tokens carry their leading
/// whitespace so joining them reproduces the text byte for byte.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSpan {
    pub op: Op,
    pub tokens: Vec<String>,
}

impl TextSpan {
    /// The words of the run without their whitespace.
    pub fn words(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.trim()).filter(|t| !t.is_empty()).collect()
    }
}

/// Splits into whitespace-delimited words, each keeping the whitespace before
/// it; trailing whitespace becomes its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut in_word = false;
    for ch in text.chars() {
        if ch.is_whitespace() {
            if in_word {
                tokens.push(std::mem::take(&mut current));
                in_word = false;
            }
        } else {
            in_word = true;
        }
        current.push(ch);
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// LCS alignment of `a` and `b` as (op, index) steps; deletions are emitted
/// before insertions at each divergence.
fn lcs_ops<T, K: PartialEq>(a: &[T], b: &[T], key: impl Fn(&T) -> K) -> Vec<(Op, usize)> {
    let (n, m) = (a.len(), b.len());
    // suffix LCS lengths
    let mut table = vec![vec![0u32; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            table[i][j] = if key(&a[i]) == key(&b[j]) {
                table[i + 1][j + 1] + 1
            } else {
                table[i + 1][j].max(table[i][j + 1])
            };
        }
    }
    let (mut i, mut j) = (0, 0);
    let mut ops = Vec::with_capacity(n.max(m));
    while i < n || j < m {
        if i < n && j < m && key(&a[i]) == key(&b[j]) {
            ops.push((Op::Equal, i));
            i += 1;
            j += 1;
        } else if j == m || (i < n && table[i + 1][j] >= table[i][j + 1]) {
            ops.push((Op::Delete, i));
            i += 1;
        } else {
            ops.push((Op::Insert, j));
            j += 1;
        }
    }
    ops
}

pub fn diff_text(a: &str, b: &str) -> Vec<TextSpan> {
    let (ta, tb) = (tokenize(a), tokenize(b));
    let mut spans: Vec<TextSpan> = Vec::new();
    for (op, idx) in lcs_ops(&ta, &tb, |t| t.clone()) {
        let token = match op {
            Op::Insert => tb[idx].clone(),
            _ => ta[idx].clone(),
        };
        match spans.last_mut() {
            Some(last) if last.op == op => last.tokens.push(token),
            _ => spans.push(TextSpan { op, tokens: vec![token] }),
        }
    }
    spans
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ApplyError {
    #[error("{section}: diff does not match the base at position {position}")]
    Mismatch { section: &'static str, position: usize },
    #[error("{section}: diff leaves {remaining} base entries unconsumed")]
    Trailing { section: &'static str, remaining: usize },
}

pub fn apply_text(spans: &[TextSpan], base: &str) -> Result<String, ApplyError> {
    let tokens = tokenize(base);
    let mut pos = 0;
    let mut out = String::with_capacity(base.len());
    for span in spans {
        for t in &span.tokens {
            match span.op {
                Op::Insert => out.push_str(t),
                Op::Equal | Op::Delete => {
                    if tokens.get(pos) != Some(t) {
                        return Err(ApplyError::Mismatch { section: "instruction", position: pos });
                    }
                    if span.op == Op::Equal {
                        out.push_str(t);
                    }
                    pos += 1;
                }
            }
        }
    }
    if pos != tokens.len() {
        return Err(ApplyError::Trailing { section: "instruction", remaining: tokens.len() - pos });
    }
    Ok(out)
}

/// Entries that have a stable identity within a prompt section.
pub trait Keyed: Clone + PartialEq {
    fn key(&self) -> &str;
}

impl Keyed for FrozenPrinciple {
    fn key(&self) -> &str {
        &self.id
    }
}

impl Keyed for KShotExample {
    fn key(&self) -> &str {
        &self.instance_id
    }
}

/// One step over a list section. Entries are aligned by id; an id kept in
/// place whose content changed is a `Modify`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ItemChange<T> {
    Equal { id: String },
    Insert { item: T },
    Delete { id: String },
    Modify { id: String, old: T, new: T },
}

impl<T> ItemChange<T> {
    pub fn is_change(&self) -> bool {
        !matches!(self, ItemChange::Equal { .. })
    }
}

pub fn diff_items<T: Keyed>(a: &[T], b: &[T]) -> Vec<ItemChange<T>> {
    let ops = lcs_ops(a, b, |x| x.key().to_string());
    let mut out = Vec::with_capacity(ops.len());
    let mut j = 0;
    for (op, idx) in ops {
        match op {
            Op::Equal => {
                let (old, new) = (&a[idx], &b[j]);
                out.push(if old == new {
                    ItemChange::Equal { id: old.key().to_string() }
                } else {
                    ItemChange::Modify { id: old.key().to_string(), old: old.clone(), new: new.clone() }
                });
                j += 1;
            }
            Op::Delete => out.push(ItemChange::Delete { id: a[idx].key().to_string() }),
            Op::Insert => {
                out.push(ItemChange::Insert { item: b[idx].clone() });
                j += 1;
            }
        }
    }
    out
}

pub fn apply_items<T: Keyed>(changes: &[ItemChange<T>], base: &[T], section: &'static str) -> Result<Vec<T>, ApplyError> {
    let mut pos = 0;
    let mut out = Vec::with_capacity(base.len());
    let take = |id: &str, pos: &mut usize| -> Result<T, ApplyError> {
        match base.get(*pos) {
            Some(x) if x.key() == id => {
                *pos += 1;
                Ok(x.clone())
            }
            _ => Err(ApplyError::Mismatch { section, position: *pos }),
        }
    };
    for change in changes {
        match change {
            ItemChange::Equal { id } => out.push(take(id, &mut pos)?),
            ItemChange::Delete { id } => {
                take(id, &mut pos)?;
            }
            ItemChange::Modify { id, old, new } => {
                if &take(id, &mut pos)? != old {
                    return Err(ApplyError::Mismatch { section, position: pos - 1 });
                }
                out.push(new.clone());
            }
            ItemChange::Insert { item } => out.push(item.clone()),
        }
    }
    if pos != base.len() {
        return Err(ApplyError::Trailing { section, remaining: base.len() - pos });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlagChange {
    pub from: bool,
    pub to: bool,
}

/// Which prompt sections differ.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionFlags {
    pub instruction: bool,
    pub principles: bool,
    pub kshot: bool,
}

impl SectionFlags {
    pub fn any(&self) -> bool {
        self.instruction || self.principles || self.kshot
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredDiff {
    pub instruction: Vec<TextSpan>,
    pub principles: Vec<ItemChange<FrozenPrinciple>>,
    pub kshot: Vec<ItemChange<KShotExample>>,
    /// Set when the demonstration-frames toggle differs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kshot_frames: Option<FlagChange>,
}

impl StructuredDiff {
    pub fn sections(&self) -> SectionFlags {
        SectionFlags {
            instruction: self.instruction.iter().any(|s| s.op != Op::Equal),
            principles: self.principles.iter().any(ItemChange::is_change),
            kshot: self.kshot.iter().any(ItemChange::is_change) || self.kshot_frames.is_some(),
        }
    }

    /// True when the two prompts are identical.
    pub fn is_empty(&self) -> bool {
        !self.sections().any()
    }

    pub fn principle_inserts(&self) -> Vec<&FrozenPrinciple> {
        self.principles
            .iter()
            .filter_map(|c| match c {
                ItemChange::Insert { item } => Some(item),
                _ => None,
            })
            .collect()
    }
}

pub fn diff_prompts(a: &ResolvedPrompt, b: &ResolvedPrompt) -> StructuredDiff {
    StructuredDiff {
        instruction: diff_text(&a.instruction, &b.instruction),
        principles: diff_items(&a.principles, &b.principles),
        kshot: diff_items(&a.kshot, &b.kshot),
        kshot_frames: (a.kshot_frames != b.kshot_frames).then_some(FlagChange {
            from: a.kshot_frames,
            to: b.kshot_frames,
        }),
    }
}

pub fn apply_diff(diff: &StructuredDiff, base: &ResolvedPrompt) -> Result<ResolvedPrompt, ApplyError> {
    let kshot_frames = match diff.kshot_frames {
        None => base.kshot_frames,
        Some(f) if f.from == base.kshot_frames => f.to,
        Some(_) => return Err(ApplyError::Mismatch { section: "kshot_frames", position: 0 }),
    };
    Ok(ResolvedPrompt {
        instruction: apply_text(&diff.instruction, &base.instruction)?,
        principles: apply_items(&diff.principles, &base.principles, "principles")?,
        kshot: apply_items(&diff.kshot, &base.kshot, "kshot")?,
        kshot_frames,
    })
}
