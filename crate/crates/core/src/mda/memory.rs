//! Byte accounting for buffers the streaming engine holds in core.

use std::fmt;
use std::sync::{Arc, Mutex};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BufferClass {
    /// Patch-sized crops and intermediates of one patch pipeline.
    Patch,
    /// Gain/shift maps, cached or per patch.
    Coefficients,
    /// Tiles resident in a tile cache.
    Tile,
}

impl BufferClass {
    pub const ALL: [BufferClass; 3] = [BufferClass::Patch, BufferClass::Coefficients, BufferClass::Tile];

    fn slot(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            BufferClass::Patch => "patch",
            BufferClass::Coefficients => "coefficients",
            BufferClass::Tile => "tile",
        }
    }
}

#[derive(Debug, Default)]
struct State {
    current: [usize; 3],
    peak_by_class: [usize; 3],
    allocations: [u64; 3],
    peak: usize,
}

/// Tracks current and peak in-core bytes per buffer class.
#[derive(Debug, Default)]
pub struct MemoryAccounting {
    state: Mutex<State>,
}

impl MemoryAccounting {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    /// Record `bytes` as live until the returned lease is dropped.
    pub fn lease(self: &Arc<Self>, class: BufferClass, bytes: usize) -> Lease {
        {
            let mut s = self.state.lock().unwrap();
            let i = class.slot();
            s.current[i] += bytes;
            s.allocations[i] += 1;
            s.peak_by_class[i] = s.peak_by_class[i].max(s.current[i]);
            let total: usize = s.current.iter().sum();
            s.peak = s.peak.max(total);
        }
        Lease {
            owner: Arc::clone(self),
            class,
            bytes,
        }
    }

    pub fn current(&self) -> usize {
        self.state.lock().unwrap().current.iter().sum()
    }

    pub fn peak(&self) -> usize {
        self.state.lock().unwrap().peak
    }

    pub fn report(&self) -> MemoryReport {
        let s = self.state.lock().unwrap();
        MemoryReport {
            peak: s.peak,
            current: s.current.iter().sum(),
            peak_by_class: BufferClass::ALL.map(|c| (c, s.peak_by_class[c.slot()])),
            allocations: BufferClass::ALL.map(|c| (c, s.allocations[c.slot()])),
        }
    }
}

/// Live allocation; releases its bytes on drop.
#[derive(Debug)]
pub struct Lease {
    owner: Arc<MemoryAccounting>,
    class: BufferClass,
    bytes: usize,
}

impl Lease {
    pub fn bytes(&self) -> usize {
        self.bytes
    }
}

impl Drop for Lease {
    fn drop(&mut self) {
        let mut s = self.owner.state.lock().unwrap();
        s.current[self.class.slot()] -= self.bytes;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemoryReport {
    pub peak: usize,
    pub current: usize,
    pub peak_by_class: [(BufferClass, usize); 3],
    pub allocations: [(BufferClass, u64); 3],
}

impl fmt::Display for MemoryReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "peak_bytes: {}", self.peak)?;
        for ((class, peak), (_, n)) in self.peak_by_class.iter().zip(&self.allocations) {
            writeln!(f, "peak_{}_bytes: {} ({} allocations)", class.name(), peak, n)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_is_monotone_and_leases_release() {
        let m = MemoryAccounting::new();
        let a = m.lease(BufferClass::Patch, 100);
        {
            let _b = m.lease(BufferClass::Tile, 50);
            assert_eq!(m.current(), 150);
        }
        assert_eq!(m.current(), 100);
        assert_eq!(m.peak(), 150);
        drop(a);
        let _c = m.lease(BufferClass::Coefficients, 10);
        assert_eq!(m.peak(), 150);
        let r = m.report();
        assert_eq!(r.peak_by_class[1], (BufferClass::Coefficients, 10));
        assert_eq!(r.current, 10);
    }
}
