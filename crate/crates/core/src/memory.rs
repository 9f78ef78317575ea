//! Allocation accounting for the inference engines.
//!
//! Every grid-sized buffer an engine creates goes through
//! [`MemoryTracker::track`] or [`MemoryTracker::alloc`], which return a
//! [`Tracked`] value holding a [`Lease`]. Dropping the value releases the
//! lease, so the tracker observes the real buffer lifetimes. Buffers that
//! scale with the grid (state, weights, layer intermediates) count towards
//! the persistent peak; per-worker scratch is recorded separately as the
//! per-cell working set.
//!
//! An optional float budget turns the tracker into a bounded device: a lease
//! that would exceed it fails with [`Error::OutOfMemory`].

use std::ops::{Deref, DerefMut};
use std::sync::{Arc, Mutex, MutexGuard};

use crate::error::{Error, Result};
use crate::grid::CellGrid;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferKind {
    /// Cell state and image buffers.
    State,
    Weights,
    /// Whole-grid layer outputs of the layer-wise engine.
    Intermediate,
    /// Constant-size per-worker working memory.
    Scratch,
}

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize)]
pub struct PhaseRecord {
    pub label: &'static str,
    pub kind: BufferKind,
    /// Positive on allocation, negative on release.
    pub delta: i64,
    /// Live grid-scale floats after this event.
    pub live: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct MemoryReport {
    pub peak_persistent_floats: usize,
    pub peak_transient_floats_per_cell: usize,
    pub peak_intermediate_floats: usize,
    pub cells: usize,
    pub phases: Vec<PhaseRecord>,
}

impl MemoryReport {
    pub fn persistent_per_cell(&self) -> f64 {
        if self.cells == 0 {
            0.0
        } else {
            self.peak_persistent_floats as f64 / self.cells as f64
        }
    }
}

#[derive(Default)]
struct Counters {
    live_global: usize,
    live_intermediate: usize,
    peak_global: usize,
    peak_intermediate: usize,
    max_scratch: usize,
    cells: usize,
    active_runs: usize,
    log: Vec<PhaseRecord>,
}

struct Inner {
    limit: Option<usize>,
    counters: Mutex<Counters>,
}

impl Inner {
    fn lock(&self) -> MutexGuard<'_, Counters> {
        self.counters.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn release(&self, lease: &Lease) {
        let mut c = self.lock();
        match lease.kind {
            BufferKind::Scratch => {}
            kind => {
                c.live_global -= lease.floats;
                if kind == BufferKind::Intermediate {
                    c.live_intermediate -= lease.floats;
                }
                let live = c.live_global;
                c.log.push(PhaseRecord {
                    label: lease.label,
                    kind,
                    delta: -(lease.floats as i64),
                    live,
                });
            }
        }
    }
}

/// Cheap-to-clone handle; [`MemoryTracker::disabled`] records nothing.
#[derive(Clone, Default)]
pub struct MemoryTracker(Option<Arc<Inner>>);

impl std::fmt::Debug for MemoryTracker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MemoryTracker")
            .field("enabled", &self.0.is_some())
            .finish()
    }
}

impl MemoryTracker {
    pub fn new() -> Self {
        Self::build(None)
    }

    /// A tracker that refuses leases once `limit` grid-scale floats are live.
    pub fn with_limit(limit: usize) -> Self {
        Self::build(Some(limit))
    }

    pub fn disabled() -> Self {
        Self(None)
    }

    fn build(limit: Option<usize>) -> Self {
        Self(Some(Arc::new(Inner {
            limit,
            counters: Mutex::new(Counters::default()),
        })))
    }

    pub fn is_enabled(&self) -> bool {
        self.0.is_some()
    }

    pub fn lease(&self, kind: BufferKind, label: &'static str, floats: usize) -> Result<Lease> {
        let Some(inner) = &self.0 else {
            return Ok(Lease::empty());
        };
        let mut c = inner.lock();
        if kind == BufferKind::Scratch {
            c.max_scratch = c.max_scratch.max(floats);
        } else {
            if let Some(limit) = inner.limit {
                if c.live_global + floats > limit {
                    return Err(Error::OutOfMemory {
                        requested: floats,
                        live: c.live_global,
                        limit,
                    });
                }
            }
            c.live_global += floats;
            c.peak_global = c.peak_global.max(c.live_global);
            if kind == BufferKind::Intermediate {
                c.live_intermediate += floats;
                c.peak_intermediate = c.peak_intermediate.max(c.live_intermediate);
            }
            let live = c.live_global;
            c.log.push(PhaseRecord {
                label,
                kind,
                delta: floats as i64,
                live,
            });
        }
        Ok(Lease {
            tracker: Some(inner.clone()),
            floats,
            kind,
            label,
        })
    }

    /// Allocates a zeroed buffer under a lease.
    pub fn alloc<T: Real>(&self, kind: BufferKind, label: &'static str, len: usize) -> Result<Tracked<Vec<T>>> {
        let lease = self.lease(kind, label, len)?;
        Ok(Tracked {
            value: vec![T::ZERO; len],
            lease,
        })
    }

    /// Starts accounting for a value allocated elsewhere.
    pub fn track<V: Footprint>(&self, value: V, kind: BufferKind, label: &'static str) -> Result<Tracked<V>> {
        let lease = self.lease(kind, label, value.floats())?;
        Ok(Tracked { value, lease })
    }

    /// Marks a run as in progress over a grid of `cells` cells. Reports are
    /// refused until every guard is dropped.
    pub fn begin_run(&self, cells: usize) -> RunGuard {
        if let Some(inner) = &self.0 {
            let mut c = inner.lock();
            c.active_runs += 1;
            c.cells = c.cells.max(cells);
        }
        RunGuard(self.0.clone())
    }

    pub fn live_floats(&self) -> usize {
        self.0.as_ref().map_or(0, |i| i.lock().live_global)
    }

    pub fn report(&self) -> Result<MemoryReport> {
        let Some(inner) = &self.0 else {
            return Ok(MemoryReport::default());
        };
        let c = inner.lock();
        if c.active_runs > 0 {
            return Err(Error::InvalidState(
                "memory report requested while a run is in progress".into(),
            ));
        }
        let per_cell_intermediate = if c.cells == 0 {
            0
        } else {
            c.peak_intermediate.div_ceil(c.cells)
        };
        Ok(MemoryReport {
            peak_persistent_floats: c.peak_global,
            peak_transient_floats_per_cell: c.max_scratch.max(per_cell_intermediate),
            peak_intermediate_floats: c.peak_intermediate,
            cells: c.cells,
            phases: c.log.clone(),
        })
    }
}

pub struct RunGuard(Option<Arc<Inner>>);

impl Drop for RunGuard {
    fn drop(&mut self) {
        if let Some(inner) = &self.0 {
            inner.lock().active_runs -= 1;
        }
    }
}

pub struct Lease {
    tracker: Option<Arc<Inner>>,
    floats: usize,
    kind: BufferKind,
    label: &'static str,
}

impl Lease {
    fn empty() -> Self {
        Self {
            tracker: None,
            floats: 0,
            kind: BufferKind::Scratch,
            label: "",
        }
    }

    pub fn floats(&self) -> usize {
        self.floats
    }
}

impl Drop for Lease {
    fn drop(&mut self) {
        if let Some(t) = self.tracker.take() {
            t.release(self);
        }
    }
}

/// Number of scalar elements a buffer occupies.
pub trait Footprint {
    fn floats(&self) -> usize;
}

impl<T> Footprint for Vec<T> {
    fn floats(&self) -> usize {
        self.len()
    }
}

impl<T: Real> Footprint for CellGrid<T> {
    fn floats(&self) -> usize {
        self.data().len()
    }
}

/// A value whose memory is accounted for until it is dropped.
pub struct Tracked<V> {
    value: V,
    lease: Lease,
}

impl<V> Tracked<V> {
    /// Wraps a value without accounting.
    pub fn untracked(value: V) -> Self {
        Self {
            value,
            lease: Lease::empty(),
        }
    }

    /// Ends accounting and hands the value back.
    pub fn into_inner(self) -> V {
        self.value
    }

    /// Replaces the payload with `f(payload)` under the same lease. The new
    /// value must have the same footprint.
    pub fn map<W>(self, f: impl FnOnce(V) -> W) -> Tracked<W> {
        Tracked {
            value: f(self.value),
            lease: self.lease,
        }
    }

    pub fn lease(&self) -> &Lease {
        &self.lease
    }
}

impl<V> Deref for Tracked<V> {
    type Target = V;
    fn deref(&self) -> &V {
        &self.value
    }
}

impl<V> DerefMut for Tracked<V> {
    fn deref_mut(&mut self) -> &mut V {
        &mut self.value
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_run_reports_zero() {
        let t = MemoryTracker::new();
        {
            let _run = t.begin_run(0);
        }
        let r = t.report().unwrap();
        assert_eq!(r.peak_persistent_floats, 0);
        assert_eq!(r.peak_transient_floats_per_cell, 0);
    }

    #[test]
    fn report_refused_during_run() {
        let t = MemoryTracker::new();
        let run = t.begin_run(10);
        assert!(matches!(t.report(), Err(Error::InvalidState(_))));
        drop(run);
        assert!(t.report().is_ok());
    }

    #[test]
    fn peaks_follow_lifetimes() {
        let t = MemoryTracker::new();
        let _run = t.begin_run(10);
        let a = t.alloc::<f32>(BufferKind::State, "a", 100).unwrap();
        let b = t.alloc::<f32>(BufferKind::Intermediate, "b", 50).unwrap();
        drop(a);
        let c = t.alloc::<f32>(BufferKind::Intermediate, "c", 20).unwrap();
        assert_eq!(t.live_floats(), 70);
        drop((b, c));
        let _s = t.lease(BufferKind::Scratch, "scratch", 96).unwrap();
        drop(_run);
        let r = t.report().unwrap();
        assert_eq!(r.peak_persistent_floats, 150);
        assert_eq!(r.peak_intermediate_floats, 70);
        assert_eq!(r.peak_transient_floats_per_cell, 96);
        assert_eq!(r.phases.len(), 6);
    }

    #[test]
    fn limit_produces_oom() {
        let t = MemoryTracker::with_limit(100);
        let _a = t.alloc::<f32>(BufferKind::State, "a", 80).unwrap();
        assert!(matches!(
            t.alloc::<f32>(BufferKind::State, "b", 30),
            Err(Error::OutOfMemory { .. })
        ));
        // scratch is not grid memory
        assert!(t.lease(BufferKind::Scratch, "s", 1000).is_ok());
    }

    #[test]
    fn disabled_tracker_is_inert() {
        let t = MemoryTracker::disabled();
        let _a = t.alloc::<f32>(BufferKind::State, "a", 80).unwrap();
        assert_eq!(t.live_floats(), 0);
        assert_eq!(t.report().unwrap(), MemoryReport::default());
    }
}
