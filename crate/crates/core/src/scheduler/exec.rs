// SPDX-License-Identifier: MIT OR Apache-2.0

//! Threaded executor.
//!
//! Three long-lived workers (load, low, high) take boxed jobs from FIFO
//! queues; the caller's thread acts as the coordinator. With a device model
//! each op is padded with sleep to its modeled duration, so wall-clock
//! traces follow the same dependency structure the simulator replays.

use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::timeline::{OpKind, StreamId, Timeline, TraceEvent};
use super::{StepCost, StreamConfig, TimingModel};
use crate::error::{Error, Result};
use crate::model::{causal_attention, linear, AttentionOut, Component, Model};
use crate::numerics::{Precision, Scalar};
use crate::pahq::store::{Part, WeightStore, DEFAULT_SLOTS};
use crate::pahq::{mixed_assembly, PrecisionPolicy, Target};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct ExecOptions {
    /// Pad every op to its modeled duration.
    pub device: Option<TimingModel>,
    /// Seed for random delays of up to `jitter_max` before each op.
    pub jitter: Option<u64>,
    pub jitter_max: Duration,
    /// Longest any wait may block before the run fails.
    pub watchdog: Duration,
    pub slots: usize,
}

impl Default for ExecOptions {
    fn default() -> Self {
        Self {
            device: None,
            jitter: None,
            jitter_max: Duration::from_micros(200),
            watchdog: Duration::from_secs(30),
            slots: DEFAULT_SLOTS,
        }
    }
}

/// Attention of one layer under one policy, from per-head normalized inputs.
#[derive(Debug, Clone)]
pub struct StepSpec<S> {
    pub policy: PrecisionPolicy,
    pub layer: usize,
    pub normed: Arc<Vec<Matrix<S>>>,
    pub batch: usize,
    pub seq: usize,
}

impl<S> StepSpec<S> {
    /// Target head of this step, if it sits in this layer.
    pub fn target(&self) -> Option<Target> {
        self.policy
            .target_head()
            .filter(|&(l, _)| l == self.layer)
            .map(|(layer, head)| Target::Head { layer, head })
    }
}

type Job = Box<dyn FnOnce(&mut Recorder) + Send>;

struct Recorder {
    stream: StreamId,
    epoch: Instant,
    rng: Option<ChaCha8Rng>,
    jitter_max: Duration,
    events: Arc<Mutex<Vec<TraceEvent>>>,
}

impl Recorder {
    fn nanos(&self) -> u64 {
        self.epoch.elapsed().as_nanos() as u64
    }

    /// Runs `work` as one traced op lasting at least `pad`.
    fn op<T>(&mut self, step: usize, op: OpKind, target: Option<Target>, pad: Duration, work: impl FnOnce() -> T) -> T {
        let t0 = Instant::now();
        let start_ns = self.nanos();
        if let Some(rng) = &mut self.rng {
            let us = rng.random_range(0..=self.jitter_max.as_micros() as u64);
            thread::sleep(Duration::from_micros(us));
        }
        let out = work();
        if let Some(rest) = pad.checked_sub(t0.elapsed()) {
            thread::sleep(rest);
        }
        let end_ns = self.nanos().max(start_ns);
        self.events.lock().unwrap_or_else(|e| e.into_inner()).push(TraceEvent {
            stream: self.stream,
            step,
            op,
            target,
            start_ns,
            end_ns,
        });
        out
    }
}

struct Worker {
    tx: Option<Sender<Job>>,
    handle: Option<JoinHandle<()>>,
}

impl Worker {
    fn spawn(mut rec: Recorder) -> Self {
        let (tx, rx): (Sender<Job>, Receiver<Job>) = mpsc::channel();
        let handle = thread::Builder::new()
            .name(format!("cq-{}", rec.stream))
            .spawn(move || {
                while let Ok(job) = rx.recv() {
                    job(&mut rec);
                }
            })
            .expect("spawn worker");
        Self {
            tx: Some(tx),
            handle: Some(handle),
        }
    }

    fn send(&self, job: Job) -> Result<()> {
        self.tx
            .as_ref()
            .and_then(|tx| tx.send(job).ok())
            .ok_or_else(|| Error::Scheduler("worker queue closed".into()))
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        self.tx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Modeled per-op durations of one step.
#[derive(Clone, Copy)]
struct Pads {
    load: [Duration; 4],
    low: [Duration; 3],
    high: [Duration; 4],
    sync: Duration,
}

impl Pads {
    fn new(tm: Option<&TimingModel>, cost: &StepCost) -> Self {
        let zero = Duration::ZERO;
        let Some(tm) = tm else {
            return Self { load: [zero; 4], low: [zero; 3], high: [zero; 4], sync: zero };
        };
        let d = |s: f64| Duration::from_secs_f64(s.max(0.0));
        Self {
            load: cost.load_bytes.map(|b| d(b / tm.transfer_bytes_per_sec)),
            low: cost.low_flops.map(|f| d(f / tm.low_flops_per_sec)),
            high: [
                d(cost.high_qkv_flops[0] / tm.high_flops_per_sec),
                d(cost.high_qkv_flops[1] / tm.high_flops_per_sec),
                d(cost.high_qkv_flops[2] / tm.high_flops_per_sec),
                d(cost.high_out_flops / tm.high_flops_per_sec),
            ],
            sync: d(tm.sync_overhead_sec),
        }
    }
}

const COMPONENTS: [(Component, Part); 3] = [(Component::Q, Part::Q), (Component::K, Part::K), (Component::V, Part::V)];

/// Output of the target head's stream.
struct HighOut<S> {
    qkv: [Matrix<S>; 3],
    z: Matrix<S>,
    out: Matrix<S>,
}

/// Long-lived three-stream executor bound to one model.
pub struct Pipeline<S: Scalar> {
    model: Model<S>,
    store: Arc<WeightStore<S>>,
    streams: StreamConfig,
    opts: ExecOptions,
    epoch: Instant,
    events: Arc<Mutex<Vec<TraceEvent>>>,
    load: Worker,
    low: Worker,
    high: Worker,
}

impl<S: Scalar> Pipeline<S> {
    pub fn new(model: Model<S>, streams: StreamConfig, opts: ExecOptions) -> Result<Self> {
        if let Some(tm) = &opts.device {
            tm.validate()?;
        }
        if streams.load_stream && opts.slots < 2 {
            return Err(Error::InvalidArgument("prefetching needs at least two bundle slots".into()));
        }
        let store = Arc::new(WeightStore::with_slots(Arc::clone(model.weights_arc()), opts.slots)?);
        let epoch = Instant::now();
        let events = Arc::new(Mutex::new(Vec::new()));
        let rec = |stream: StreamId, salt: u64| Recorder {
            stream,
            epoch,
            rng: opts.jitter.map(|s| ChaCha8Rng::seed_from_u64(s ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))),
            jitter_max: opts.jitter_max,
            events: Arc::clone(&events),
        };
        Ok(Self {
            load: Worker::spawn(rec(StreamId::Load, 1)),
            low: Worker::spawn(rec(StreamId::Low, 2)),
            high: Worker::spawn(rec(StreamId::High, 3)),
            model,
            store,
            streams,
            opts,
            epoch,
            events,
        })
    }

    pub fn store(&self) -> &Arc<WeightStore<S>> {
        &self.store
    }

    pub fn streams(&self) -> StreamConfig {
        self.streams
    }

    fn high_worker(&self) -> &Worker {
        if self.streams.split_compute {
            &self.high
        } else {
            &self.low
        }
    }

    fn recv<T>(&self, rx: &Receiver<Result<T>>, what: &str) -> Result<T> {
        rx.recv_timeout(self.opts.watchdog)
            .map_err(|_| Error::Deadlock(self.opts.watchdog, what.to_string()))?
    }

    /// Queues the bundle load for `target` on the load stream. The returned
    /// receiver yields once every part is on the device.
    fn enqueue_load(&self, step: usize, target: Target, pads: Pads) -> Result<Receiver<Result<()>>> {
        let (tx, rx) = mpsc::channel();
        let store = Arc::clone(&self.store);
        self.load.send(Box::new(move |rec: &mut Recorder| {
            let res = (|| {
                if let crate::pahq::store::LoadTicket::Load(slot) = store.begin_load(target)? {
                    for (k, &part) in super::LOAD_PARTS.iter().enumerate() {
                        rec.op(step, OpKind::Load(part), Some(target), pads.load[k], || ());
                        store.transfer_part(slot, part)?;
                    }
                    store.finish_load(slot)?;
                }
                Ok(())
            })();
            let _ = tx.send(res);
        }))?;
        Ok(rx)
    }

    /// Runs `steps` in order and returns each step's attention output plus
    /// the wall-clock trace of this run.
    pub fn run(&mut self, steps: &[StepSpec<S>]) -> Result<(Vec<AttentionOut<S>>, Timeline)> {
        let first = self.events.lock().unwrap_or_else(|e| e.into_inner()).len();
        let base_ns = self.epoch.elapsed().as_nanos() as u64;
        let costs: Vec<StepCost> = steps
            .iter()
            .enumerate()
            .map(|(t, s)| {
                let resident = t > 0 && steps[t - 1].target().is_some() && steps[t - 1].target() == s.target();
                StepCost::new(self.model.config(), s.batch, s.seq, s.target(), resident)
            })
            .collect();
        let pads: Vec<Pads> = costs.iter().map(|c| Pads::new(self.opts.device.as_ref(), c)).collect();
        let mut pending: Vec<Option<Receiver<Result<()>>>> = (0..steps.len()).map(|_| None).collect();
        let mut outs = Vec::with_capacity(steps.len());
        for (t, spec) in steps.iter().enumerate() {
            if self.streams.load_stream {
                if t == 0 {
                    if let Some(target) = spec.target() {
                        pending[0] = Some(self.enqueue_load(0, target, pads[0])?);
                    }
                }
                if let Some(next) = steps.get(t + 1).and_then(StepSpec::target) {
                    pending[t + 1] = Some(self.enqueue_load(t + 1, next, pads[t + 1])?);
                }
            } else if let Some(target) = spec.target() {
                let rx = self.enqueue_load(t, target, pads[t])?;
                self.recv(&rx, &format!("bundle load of step {t}"))?;
            }
            outs.push(self.step(t, spec, pads[t])?);
            if let Some(rx) = pending[t].take() {
                self.recv(&rx, &format!("bundle load of step {t}"))?;
            }
        }
        let mut events: Vec<TraceEvent> = self.events.lock().unwrap_or_else(|e| e.into_inner())[first..].to_vec();
        for e in &mut events {
            e.start_ns = e.start_ns.saturating_sub(base_ns);
            e.end_ns = e.end_ns.saturating_sub(base_ns);
        }
        Ok((outs, Timeline { events }))
    }

    fn step(&self, t: usize, spec: &StepSpec<S>, pads: Pads) -> Result<AttentionOut<S>> {
        let c = *self.model.config();
        if spec.normed.len() != c.n_heads || spec.layer >= c.n_layers {
            return Err(Error::Shape(format!(
                "step {t}: {} head inputs for layer {} of a {}-layer, {}-head model",
                spec.normed.len(),
                spec.layer,
                c.n_layers,
                c.n_heads
            )));
        }
        let target = spec.target();
        let mut low_rx = Vec::with_capacity(3);
        for (k, (comp, part)) in COMPONENTS.into_iter().enumerate() {
            let (tx, rx) = mpsc::channel();
            let (model, spec) = (self.model.clone(), spec.clone());
            self.low.send(Box::new(move |rec: &mut Recorder| {
                let r = rec.op(t, OpKind::Low(part), target, pads.low[k], || {
                    model.low_component(&spec.policy, comp, spec.layer, &spec.normed)
                });
                let _ = tx.send(r);
            }))?;
            low_rx.push(rx);
        }
        let high_rx = match target {
            Some(tg @ Target::Head { head, .. }) => {
                let (tx, rx) = mpsc::channel();
                let (store, spec, watchdog) = (Arc::clone(&self.store), spec.clone(), self.opts.watchdog);
                let dk = c.d_k;
                // One job per op keeps the stream FIFO fine-grained; the
                // results thread through a local channel on the same worker.
                let (qkv_tx, qkv_rx) = mpsc::channel::<Result<Matrix<S>>>();
                for (k, (_, part)) in COMPONENTS.into_iter().enumerate() {
                    let (store, spec, qkv_tx) = (Arc::clone(&store), spec.clone(), qkv_tx.clone());
                    self.high_worker().send(Box::new(move |rec: &mut Recorder| {
                        let w = store.wait_part(tg, part, watchdog);
                        let r = w.map(|w| {
                            rec.op(t, OpKind::High(part), target, pads.high[k], || {
                                linear(&spec.normed[head], &w, None, Precision::P32)
                            })
                        });
                        let _ = qkv_tx.send(r);
                    }))?;
                }
                drop(qkv_tx);
                self.high_worker().send(Box::new(move |rec: &mut Recorder| {
                    let res = (|| {
                        let mut qkv = Vec::with_capacity(3);
                        for _ in 0..3 {
                            qkv.push(qkv_rx.recv().map_err(|_| Error::Scheduler("high stream lost a result".into()))??);
                        }
                        let w_o = store.wait_part(tg, Part::O, watchdog)?;
                        let (z, out) = rec.op(t, OpKind::High(Part::O), target, pads.high[3], || {
                            let z = causal_attention(&qkv[0], &qkv[1], &qkv[2], spec.batch, spec.seq);
                            let rows = w_o.row_slice(head * dk, (head + 1) * dk);
                            let out = linear(&z, &rows, None, Precision::P32);
                            (z, out)
                        });
                        let v = qkv.pop().expect("v");
                        let k = qkv.pop().expect("k");
                        let q = qkv.pop().expect("q");
                        Ok(HighOut { qkv: [q, k, v], z, out })
                    })();
                    let _ = tx.send(res);
                }))?;
                Some((head, rx))
            }
            _ => None,
        };

        let mut low = Vec::with_capacity(3);
        for (rx, name) in low_rx.iter().zip(["q", "k", "v"]) {
            low.push(self.recv(rx, &format!("low_{name} of step {t}"))?);
        }
        let high = match &high_rx {
            Some((head, rx)) => Some((*head, self.recv(rx, &format!("high stream of step {t}"))?)),
            None => None,
        };
        let mut rec = Recorder {
            stream: StreamId::Coordinator,
            epoch: self.epoch,
            rng: None,
            jitter_max: Duration::ZERO,
            events: Arc::clone(&self.events),
        };
        rec.op(t, OpKind::Sync, target, pads.sync, || self.assemble(spec, low, high))
    }

    fn assemble(
        &self,
        spec: &StepSpec<S>,
        mut low: Vec<Matrix<S>>,
        high: Option<(usize, HighOut<S>)>,
    ) -> Result<AttentionOut<S>> {
        let n = self.model.config().n_heads;
        let v = low.pop().expect("v");
        let k = low.pop().expect("k");
        let q = low.pop().expect("q");
        let (q, k, v, high) = match high {
            Some((h, ho)) => {
                let [hq, hk, hv] = &ho.qkv;
                (
                    mixed_assembly(&q, hq, h, n)?,
                    mixed_assembly(&k, hk, h, n)?,
                    mixed_assembly(&v, hv, h, n)?,
                    Some((h, ho)),
                )
            }
            None => (q, k, v, None),
        };
        let mut z = self.model.attend(&q, &k, &v, spec.batch, spec.seq);
        let mut out = Vec::with_capacity(n);
        for (head, zh) in z.iter().enumerate() {
            let m = match &high {
                Some((h, ho)) if *h == head => ho.out.clone(),
                _ => {
                    let p = spec.policy.output_precision(spec.layer, head);
                    linear(zh, &self.model.out_weight(&spec.policy, spec.layer, head, p), None, p)
                }
            };
            out.push(Arc::new(m));
        }
        if let Some((h, ho)) = high {
            z[h] = ho.z;
        }
        Ok(AttentionOut { q, k, v, z, out })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init::random_weights, layer_norm, ModelConfig};
    use crate::model::NodeId;
    use crate::pahq::policy_for_edge;
    use crate::scheduler::validate_timeline;

    fn setup() -> (Model<f32>, StepSpec<f32>) {
        let c = ModelConfig::new(2, 4, 16, 32, 8);
        let model = Model::new(random_weights(c, 11, 0.2)).unwrap();
        let x = Matrix::from_fn(2 * 5, 16, |r, col| ((r * 7 + col * 3) % 11) as f32 * 0.1 - 0.5);
        let lw = &model.weights().layers[1];
        let normed: Vec<Matrix<f32>> = (0..4).map(|_| layer_norm(&x, &lw.ln_gamma, &lw.ln_beta)).collect();
        let policy = PrecisionPolicy::pahq_base().with_target(Some(Target::Head { layer: 1, head: 2 }));
        let spec = StepSpec { policy, layer: 1, normed: Arc::new(normed), batch: 2, seq: 5 };
        (model, spec)
    }

    #[test]
    fn matches_reference_in_every_config() {
        let (model, spec) = setup();
        let want = model.attention_layer(&spec.policy, 1, &spec.normed, 2, 5).unwrap();
        for s in StreamConfig::ALL {
            let mut p = Pipeline::new(model.clone(), s, ExecOptions::default()).unwrap();
            let (outs, tl) = p.run(&[spec.clone(), spec.clone()]).unwrap();
            for got in &outs {
                assert!(got.q.bitwise_eq(&want.q) && got.k.bitwise_eq(&want.k) && got.v.bitwise_eq(&want.v), "{s}");
                for h in 0..4 {
                    assert!(got.z[h].bitwise_eq(&want.z[h]), "{s} z{h}");
                    assert!(got.out[h].bitwise_eq(&want.out[h]), "{s} out{h}");
                }
            }
            validate_timeline(&tl).unwrap();
            assert!(p.store().is_coherent());
        }
    }

    #[test]
    fn no_target_runs_low_only() {
        let (model, mut spec) = setup();
        spec.policy = policy_for_edge(&crate::model::Edge::new(NodeId::Embed, NodeId::Unembed));
        let want = model.attention_layer(&spec.policy, 1, &spec.normed, 2, 5).unwrap();
        let mut p = Pipeline::new(model, StreamConfig::BOTH, ExecOptions::default()).unwrap();
        let (outs, tl) = p.run(&[spec]).unwrap();
        assert!(outs[0].q.bitwise_eq(&want.q));
        assert!(tl.events.iter().all(|e| !matches!(e.op, OpKind::High(_) | OpKind::Load(_))));
    }

    #[test]
    fn prefetch_needs_two_slots() {
        let (model, _) = setup();
        let opts = ExecOptions { slots: 1, ..Default::default() };
        assert!(Pipeline::new(model, StreamConfig::BOTH, opts).is_err());
    }
}
