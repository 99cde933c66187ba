//! Bounded-concurrency execution over a slice of work items.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// Applies `f` to every item with at most `parallelism` calls in flight and
/// returns the results in input order. Every item is attempted.
///
/// `parallelism` is clamped to at least one worker.
pub fn bounded_map<T, R, F>(items: &[T], parallelism: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let workers = parallelism.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every slot is filled"))
        .collect()
}

/// Counts concurrent entries into a section and remembers the peak.
#[derive(Debug, Default)]
pub struct InFlightGauge {
    current: AtomicUsize,
    peak: AtomicUsize,
}

impl InFlightGauge {
    pub fn enter(&self) -> InFlightGuard<'_> {
        let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        InFlightGuard { gauge: self }
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

pub struct InFlightGuard<'a> {
    gauge: &'a InFlightGauge,
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        self.gauge.current.fetch_sub(1, Ordering::SeqCst);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    #[test]
    fn preserves_order_and_bounds_concurrency() {
        for parallelism in [1, 2, 4, 8] {
            let gauge = InFlightGauge::default();
            let items: Vec<u64> = (0..24).collect();
            let out = bounded_map(&items, parallelism, |i, x| {
                let _g = gauge.enter();
                std::thread::sleep(Duration::from_millis(2 + (x % 3)));
                (i, x * 10)
            });
            assert_eq!(out, items.iter().enumerate().map(|(i, x)| (i, x * 10)).collect::<Vec<_>>());
            assert!(gauge.peak() <= parallelism, "peak {} > {}", gauge.peak(), parallelism);
            if parallelism == 1 {
                assert_eq!(gauge.peak(), 1);
            }
        }
    }

    #[test]
    fn empty_input() {
        let out: Vec<u8> = bounded_map(&Vec::<u8>::new(), 4, |_, x| *x);
        assert!(out.is_empty());
    }
}
