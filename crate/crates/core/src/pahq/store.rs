// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dual-precision weight store.
//!
//! The host bank keeps the native masters. The device bank keeps the FP8
//! image of every tensor plus `k` slots for full-precision bundles: one
//! head's Q/K/V slices with its layer's whole `W_O`, or one MLP's two
//! matrices. Slots move empty -> loading -> ready under a mutex; waiters
//! block on a condition variable for the one part they need.

use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::Target;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, WeightImages, WeightSet};
use crate::numerics::{Precision, Scalar};
use crate::tensor::Matrix;

/// Number of bundle slots: the current bundle plus one prefetched.
pub const DEFAULT_SLOTS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Part {
    Q,
    K,
    V,
    O,
    MlpIn,
    MlpOut,
}

impl Part {
    pub fn for_target(t: Target) -> &'static [Part] {
        match t {
            Target::Head { .. } => &[Part::Q, Part::K, Part::V, Part::O],
            Target::Mlp { .. } => &[Part::MlpIn, Part::MlpOut],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Part::Q => "q",
            Part::K => "k",
            Part::V => "v",
            Part::O => "o",
            Part::MlpIn => "mlp_in",
            Part::MlpOut => "mlp_out",
        }
    }
}

/// Master copy of one bundle part, cut from the host bank.
pub fn master_part<S: Scalar>(w: &WeightSet<S>, target: Target, part: Part) -> Result<Matrix<S>> {
    let c = &w.config;
    let bad = || Error::InvalidArgument(format!("part {} does not belong to {}", part.name(), target.node()));
    match target {
        Target::Head { layer, head } => {
            if layer >= c.n_layers || head >= c.n_heads {
                return Err(Error::InvalidArgument(format!("no head {}", target.node())));
            }
            let l = &w.layers[layer];
            let (a, b) = (head * c.d_k, (head + 1) * c.d_k);
            match part {
                Part::Q => Ok(l.w_q.col_slice(a, b)),
                Part::K => Ok(l.w_k.col_slice(a, b)),
                Part::V => Ok(l.w_v.col_slice(a, b)),
                Part::O => Ok(l.w_o.clone()),
                _ => Err(bad()),
            }
        }
        Target::Mlp { layer } => {
            let m = w
                .layers
                .get(layer)
                .and_then(|l| l.mlp.as_ref())
                .ok_or_else(|| Error::InvalidArgument(format!("no MLP in layer {layer}")))?;
            match part {
                Part::MlpIn => Ok(m.w_in.clone()),
                Part::MlpOut => Ok(m.w_out.clone()),
                _ => Err(bad()),
            }
        }
    }
}

/// Element count of one full-precision bundle.
pub fn bundle_elements(c: &ModelConfig, target: Target) -> usize {
    match target {
        Target::Head { .. } => 3 * c.d_model * c.d_k + c.d_model * c.d_model,
        Target::Mlp { .. } => 2 * c.d_model * c.d_mlp,
    }
}

/// Bytes of one head bundle at FP32.
pub fn head_bundle_bytes(c: &ModelConfig) -> usize {
    4 * bundle_elements(c, Target::Head { layer: 0, head: 0 })
}

/// Largest bundle of the model at FP32.
pub fn max_bundle_bytes(c: &ModelConfig) -> usize {
    let head = head_bundle_bytes(c);
    if c.has_mlp() {
        head.max(4 * bundle_elements(c, Target::Mlp { layer: 0 }))
    } else {
        head
    }
}

#[derive(Debug, Clone)]
enum Slot<S> {
    Empty,
    Loading {
        target: Target,
        parts: Vec<(Part, Arc<Matrix<S>>)>,
        last_use: u64,
    },
    Ready {
        target: Target,
        parts: Vec<(Part, Arc<Matrix<S>>)>,
        last_use: u64,
    },
}

impl<S> Slot<S> {
    fn target(&self) -> Option<Target> {
        match self {
            Slot::Empty => None,
            Slot::Loading { target, .. } | Slot::Ready { target, .. } => Some(*target),
        }
    }

    fn parts(&self) -> &[(Part, Arc<Matrix<S>>)] {
        match self {
            Slot::Empty => &[],
            Slot::Loading { parts, .. } | Slot::Ready { parts, .. } => parts,
        }
    }
}

/// Observable state of a slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotState {
    Empty,
    Loading(Target),
    Ready(Target),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StoreTelemetry {
    pub host_bytes: usize,
    pub device_fp8_bytes: usize,
    pub bundle_loads: usize,
    pub resident_hits: usize,
    pub evictions: usize,
    pub peak_slot_bytes: usize,
    pub peak_device_bytes: usize,
}

/// Outcome of [`WeightStore::begin_load`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadTicket {
    /// The bundle is already in a slot; nothing to transfer.
    Resident(usize),
    /// The caller must transfer every part into this slot.
    Load(usize),
}

#[derive(Debug)]
struct Inner<S> {
    slots: Vec<Slot<S>>,
    clock: u64,
    telemetry: StoreTelemetry,
}

#[derive(Debug)]
pub struct WeightStore<S: Scalar> {
    host: Arc<WeightSet<S>>,
    device: WeightImages<S>,
    inner: Mutex<Inner<S>>,
    ready: Condvar,
}

/// Builds the store: FP8 images of every tensor on the device bank, masters
/// on the host bank, `DEFAULT_SLOTS` empty bundle slots.
pub fn build_store<S: Scalar>(weights: Arc<WeightSet<S>>) -> Result<WeightStore<S>> {
    WeightStore::with_slots(weights, DEFAULT_SLOTS)
}

impl<S: Scalar> WeightStore<S> {
    pub fn with_slots(weights: Arc<WeightSet<S>>, k: usize) -> Result<Self> {
        weights.validate()?;
        if k == 0 {
            return Err(Error::InvalidArgument("a store needs at least one bundle slot".into()));
        }
        let elements = weights.element_count();
        let device = WeightImages::build(&weights, Precision::P8);
        let telemetry = StoreTelemetry {
            host_bytes: 4 * elements,
            device_fp8_bytes: elements,
            peak_device_bytes: elements,
            ..Default::default()
        };
        Ok(Self {
            host: weights,
            device,
            inner: Mutex::new(Inner {
                slots: vec![Slot::Empty; k],
                clock: 0,
                telemetry,
            }),
            ready: Condvar::new(),
        })
    }

    pub fn host(&self) -> &WeightSet<S> {
        &self.host
    }

    pub fn host_arc(&self) -> &Arc<WeightSet<S>> {
        &self.host
    }

    /// FP8 bank.
    pub fn device(&self) -> &WeightImages<S> {
        &self.device
    }

    pub fn config(&self) -> &ModelConfig {
        &self.host.config
    }

    pub fn slot_count(&self) -> usize {
        self.lock().slots.len()
    }

    fn lock(&self) -> MutexGuard<'_, Inner<S>> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn slot_states(&self) -> Vec<SlotState> {
        self.lock()
            .slots
            .iter()
            .map(|s| match s {
                Slot::Empty => SlotState::Empty,
                Slot::Loading { target, .. } => SlotState::Loading(*target),
                Slot::Ready { target, .. } => SlotState::Ready(*target),
            })
            .collect()
    }

    pub fn telemetry(&self) -> StoreTelemetry {
        self.lock().telemetry.clone()
    }

    /// Device bytes right now: the FP8 bank plus every transferred part.
    pub fn resident_bytes(&self) -> usize {
        let inner = self.lock();
        inner.telemetry.device_fp8_bytes + slot_bytes(&inner.slots)
    }

    /// Reserves a slot for `target`. An already present bundle is reported
    /// as resident; otherwise an empty slot is used, or the least recently
    /// used ready slot is evicted. Loading slots are never evicted.
    pub fn begin_load(&self, target: Target) -> Result<LoadTicket> {
        let mut inner = self.lock();
        inner.clock += 1;
        let now = inner.clock;
        if let Some(i) = inner.slots.iter().position(|s| s.target() == Some(target)) {
            inner.telemetry.resident_hits += 1;
            if let Slot::Loading { last_use, .. } | Slot::Ready { last_use, .. } = &mut inner.slots[i] {
                *last_use = now;
            }
            return Ok(LoadTicket::Resident(i));
        }
        let victim = inner
            .slots
            .iter()
            .position(|s| matches!(s, Slot::Empty))
            .or_else(|| {
                inner
                    .slots
                    .iter()
                    .enumerate()
                    .filter_map(|(i, s)| match s {
                        Slot::Ready { last_use, .. } => Some((*last_use, i)),
                        _ => None,
                    })
                    .min()
                    .map(|(_, i)| i)
            })
            .ok_or_else(|| Error::Scheduler("every bundle slot is mid-load".into()))?;
        if !matches!(inner.slots[victim], Slot::Empty) {
            inner.telemetry.evictions += 1;
        }
        inner.slots[victim] = Slot::Loading {
            target,
            parts: Vec::new(),
            last_use: now,
        };
        inner.telemetry.bundle_loads += 1;
        Ok(LoadTicket::Load(victim))
    }

    /// Copies one part from the host bank into a loading slot and wakes
    /// waiters. Returns the bytes moved.
    pub fn transfer_part(&self, slot: usize, part: Part) -> Result<usize> {
        let target = match self.lock().slots.get(slot) {
            Some(Slot::Loading { target, .. }) => *target,
            _ => return Err(Error::Scheduler(format!("slot {slot} is not loading"))),
        };
        let m = Arc::new(master_part(&self.host, target, part)?);
        let bytes = 4 * m.data().len();
        {
            let mut inner = self.lock();
            match &mut inner.slots[slot] {
                Slot::Loading { target: t, parts, .. } if *t == target => {
                    if !parts.iter().any(|(p, _)| *p == part) {
                        parts.push((part, m));
                    }
                }
                _ => return Err(Error::Scheduler(format!("slot {slot} changed during transfer"))),
            }
            let now = slot_bytes(&inner.slots);
            let t = &mut inner.telemetry;
            t.peak_slot_bytes = t.peak_slot_bytes.max(now);
            t.peak_device_bytes = t.peak_device_bytes.max(t.device_fp8_bytes + now);
        }
        self.ready.notify_all();
        Ok(bytes)
    }

    /// Marks a fully transferred slot ready.
    pub fn finish_load(&self, slot: usize) -> Result<()> {
        {
            let mut inner = self.lock();
            let s = inner
                .slots
                .get_mut(slot)
                .ok_or_else(|| Error::Scheduler(format!("no slot {slot}")))?;
            let Slot::Loading { target, parts, last_use } = std::mem::replace(s, Slot::Empty) else {
                return Err(Error::Scheduler(format!("slot {slot} is not loading")));
            };
            let needed = Part::for_target(target);
            if needed.iter().any(|p| !parts.iter().any(|(q, _)| q == p)) {
                *s = Slot::Loading { target, parts, last_use };
                return Err(Error::Scheduler(format!("slot {slot} finished with parts missing")));
            }
            *s = Slot::Ready { target, parts, last_use };
        }
        self.ready.notify_all();
        Ok(())
    }

    /// Loads a whole bundle synchronously.
    pub fn load(&self, target: Target) -> Result<LoadTicket> {
        let ticket = self.begin_load(target)?;
        if let LoadTicket::Load(slot) = ticket {
            for &p in Part::for_target(target) {
                self.transfer_part(slot, p)?;
            }
            self.finish_load(slot)?;
        }
        Ok(ticket)
    }

    /// Blocks until `part` of `target` is on the device. Errors with
    /// [`Error::Deadlock`] after `timeout`.
    pub fn wait_part(&self, target: Target, part: Part, timeout: Duration) -> Result<Arc<Matrix<S>>> {
        let deadline = Instant::now() + timeout;
        let mut inner = self.lock();
        loop {
            let found = inner
                .slots
                .iter()
                .find(|s| s.target() == Some(target))
                .and_then(|s| s.parts().iter().find(|(p, _)| *p == part))
                .map(|(_, m)| Arc::clone(m));
            if let Some(m) = found {
                return Ok(m);
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(Error::Deadlock(
                    timeout,
                    format!("part {} of {}", part.name(), target.node()),
                ));
            }
            inner = self
                .ready
                .wait_timeout(inner, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }

    /// Ready bundle parts, if `target` is fully loaded.
    pub fn ready_bundle(&self, target: Target) -> Option<Vec<(Part, Arc<Matrix<S>>)>> {
        self.lock().slots.iter().find_map(|s| match s {
            Slot::Ready { target: t, parts, .. } if *t == target => Some(parts.clone()),
            _ => None,
        })
    }

    /// Every ready bundle equals its host master bitwise.
    pub fn is_coherent(&self) -> bool {
        let inner = self.lock();
        inner.slots.iter().all(|s| match s {
            Slot::Ready { target, parts, .. } => parts.iter().all(|(p, m)| {
                master_part(&self.host, *target, *p).is_ok_and(|want| want.bitwise_eq(m))
            }),
            _ => true,
        })
    }

    /// The FP8 bank equals a fresh quantization of the host bank.
    pub fn fp8_bank_matches_host(&self) -> bool {
        let fresh = WeightImages::build(&self.host, Precision::P8);
        images_eq(&fresh, &self.device)
    }

    /// Empties every slot.
    pub fn clear(&self) {
        let mut inner = self.lock();
        for s in &mut inner.slots {
            *s = Slot::Empty;
        }
    }
}

fn slot_bytes<S: Scalar>(slots: &[Slot<S>]) -> usize {
    slots
        .iter()
        .flat_map(|s| s.parts())
        .map(|(_, m)| 4 * m.data().len())
        .sum()
}

fn images_eq<S: Scalar>(a: &WeightImages<S>, b: &WeightImages<S>) -> bool {
    let grid_eq = |x: &Vec<Vec<Matrix<S>>>, y: &Vec<Vec<Matrix<S>>>| {
        x.len() == y.len()
            && x.iter().zip(y).all(|(p, q)| {
                p.len() == q.len() && p.iter().zip(q).all(|(m, n)| m.bitwise_eq(n))
            })
    };
    let opt_eq = |x: &Vec<Option<Matrix<S>>>, y: &Vec<Option<Matrix<S>>>| {
        x.len() == y.len()
            && x.iter().zip(y).all(|(p, q)| match (p, q) {
                (Some(m), Some(n)) => m.bitwise_eq(n),
                (None, None) => true,
                _ => false,
            })
    };
    grid_eq(&a.q, &b.q)
        && grid_eq(&a.k, &b.k)
        && grid_eq(&a.v, &b.v)
        && grid_eq(&a.o, &b.o)
        && opt_eq(&a.mlp_in, &b.mlp_in)
        && opt_eq(&a.mlp_out, &b.mlp_out)
        && a.unembed.bitwise_eq(&b.unembed)
}

/// Device bytes the store can hold at most: FP8 bank plus `k` of the
/// largest bundle.
pub fn device_bound_bytes(c: &ModelConfig, k: usize) -> usize {
    c.parameter_count() + k * max_bundle_bytes(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init::random_weights;

    fn store(k: usize) -> WeightStore<f32> {
        let c = ModelConfig::new(2, 4, 16, 10, 6).with_mlp(8);
        WeightStore::with_slots(Arc::new(random_weights(c, 1, 0.2)), k).unwrap()
    }

    const A: Target = Target::Head { layer: 0, head: 1 };
    const B: Target = Target::Head { layer: 1, head: 3 };
    const C: Target = Target::Mlp { layer: 1 };

    #[test]
    fn fp8_bank_is_a_quarter() {
        let s = store(2);
        let t = s.telemetry();
        assert_eq!(4 * t.device_fp8_bytes, t.host_bytes);
        assert!(s.fp8_bank_matches_host());
    }

    #[test]
    fn slot_lifecycle() {
        let s = store(2);
        assert_eq!(s.slot_states(), vec![SlotState::Empty; 2]);
        let LoadTicket::Load(i) = s.begin_load(A).unwrap() else { panic!() };
        assert_eq!(s.slot_states()[i], SlotState::Loading(A));
        for &p in Part::for_target(A) {
            s.transfer_part(i, p).unwrap();
        }
        s.finish_load(i).unwrap();
        assert_eq!(s.slot_states()[i], SlotState::Ready(A));
        assert_eq!(s.load(A).unwrap(), LoadTicket::Resident(i));
        assert!(s.is_coherent());
    }

    #[test]
    fn finishing_early_is_rejected() {
        let s = store(1);
        let LoadTicket::Load(i) = s.begin_load(A).unwrap() else { panic!() };
        s.transfer_part(i, Part::Q).unwrap();
        assert!(s.finish_load(i).is_err());
    }

    #[test]
    fn lru_eviction_keeps_recent() {
        let s = store(2);
        s.load(A).unwrap();
        s.load(B).unwrap();
        s.load(A).unwrap();
        s.load(C).unwrap();
        let states = s.slot_states();
        assert!(states.contains(&SlotState::Ready(A)));
        assert!(states.contains(&SlotState::Ready(C)));
        assert_eq!(s.telemetry().evictions, 1);
    }

    #[test]
    fn head_bundle_size() {
        let s = store(2);
        s.load(A).unwrap();
        let c = s.config();
        assert_eq!(s.resident_bytes(), c.parameter_count() + head_bundle_bytes(c));
    }

    #[test]
    fn wait_times_out_without_loader() {
        let s = store(2);
        let err = s.wait_part(A, Part::Q, Duration::from_millis(20)).unwrap_err();
        assert!(matches!(err, Error::Deadlock(..)));
    }

    #[test]
    fn waiter_wakes_on_transfer() {
        let s = Arc::new(store(2));
        let LoadTicket::Load(i) = s.begin_load(B).unwrap() else { panic!() };
        let s2 = Arc::clone(&s);
        let h = std::thread::spawn(move || s2.wait_part(B, Part::K, Duration::from_secs(5)));
        std::thread::sleep(Duration::from_millis(10));
        s.transfer_part(i, Part::K).unwrap();
        let got = h.join().unwrap().unwrap();
        assert!(got.bitwise_eq(&master_part(s.host(), B, Part::K).unwrap()));
    }
}
