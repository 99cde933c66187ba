use std::path::Path;

use serde::{Deserialize, Serialize};

/// Bumped whenever a bundled template changes; the text is part of every request digest.
pub const ASSET_VERSION: &str = "v1";

/// Fixed text templates for every model call the workbench makes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptAssets {
    pub version: String,
    pub format_directive: String,
    pub evidence_extraction: String,
    pub draft_rationale: String,
    pub instance_principle: String,
    pub generalize_principles: String,
}

const FILES: [&str; 5] = [
    "format_directive.txt",
    "evidence_extraction.txt",
    "draft_rationale.txt",
    "instance_principle.txt",
    "generalize_principles.txt",
];

impl Default for PromptAssets {
    fn default() -> Self {
        Self::bundled()
    }
}

impl PromptAssets {
    pub fn bundled() -> Self {
        PromptAssets {
            version: ASSET_VERSION.to_string(),
            format_directive: include_str!("../../assets/format_directive.txt").to_string(),
            evidence_extraction: include_str!("../../assets/evidence_extraction.txt").to_string(),
            draft_rationale: include_str!("../../assets/draft_rationale.txt").to_string(),
            instance_principle: include_str!("../../assets/instance_principle.txt").to_string(),
            generalize_principles: include_str!("../../assets/generalize_principles.txt").to_string(),
        }
    }

    fn slots_mut(&mut self) -> [&mut String; 5] {
        [
            &mut self.format_directive,
            &mut self.evidence_extraction,
            &mut self.draft_rationale,
            &mut self.instance_principle,
            &mut self.generalize_principles,
        ]
    }

    fn slots(&self) -> [&String; 5] {
        [
            &self.format_directive,
            &self.evidence_extraction,
            &self.draft_rationale,
            &self.instance_principle,
            &self.generalize_principles,
        ]
    }

    /// Bundled assets, overridden by any template files present in `dir`.
    pub fn load_dir(dir: &Path) -> std::io::Result<Self> {
        let mut assets = Self::bundled();
        if let Ok(v) = std::fs::read_to_string(dir.join("VERSION")) {
            assets.version = v.trim().to_string();
        }
        for (slot, file) in assets.slots_mut().into_iter().zip(FILES) {
            match std::fs::read_to_string(dir.join(file)) {
                Ok(text) => *slot = text,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(e),
            }
        }
        Ok(assets)
    }

    pub fn write_dir(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("VERSION"), format!("{}\n", self.version))?;
        for (text, file) in self.slots().into_iter().zip(FILES) {
            std::fs::write(dir.join(file), text)?;
        }
        Ok(())
    }
}

/// Replaces `{name}` placeholders.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (name, value) in vars {
        out = out.replace(&format!("{{{name}}}"), value);
    }
    out
}
