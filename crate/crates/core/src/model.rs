//! The conflict-aware mixture-of-experts forecaster.
//!
//! For a metric-major window `w` (`K×l`), every expert produces a
//! 128-dimensional embedding of the whole window. Metric `k` then blends the
//! embeddings with weights computed from its own row `w[k]` only:
//!
//! ```text
//! G_k = softmax(ε · W_s w[k] + (1 − ε) · W_pk w[k])
//! B_k = Σ_m G_k[m] · f_m(w)
//! ŷ_k = Tower_k(B_k)
//! ```
//!
//! The shared gate `W_s` is common to all metrics, `W_pk` is metric `k`'s
//! personalized gate. [`Variant`] selects the ablations.
//!
//! All per-metric parameters are stored stacked along a leading `K` axis so a
//! batch runs as a handful of grouped matrix products.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Width of every expert embedding.
pub const EMBED_DIM: usize = 128;
/// Output width of an expert's first dense layer.
pub const EXPERT_HIDDEN: usize = 128;
pub const TOWER_HIDDEN: usize = 32;
pub const TOWER_DROPOUT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    /// Shared-Bottom: towers read the mean expert embedding.
    NoGate,
    /// Gates read the flattened window of all metrics.
    NoSelection,
    /// Personalized gates only.
    NoSGate,
    /// Shared gate only.
    NoPGate,
    /// Experts are two dense layers over the flattened window.
    NoConv,
    /// One isolated expert and tower per metric, fed only that metric.
    SingleTask,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoGate,
        Variant::NoSelection,
        Variant::NoSGate,
        Variant::NoPGate,
        Variant::NoConv,
        Variant::SingleTask,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoGate => "no_gate",
            Variant::NoSelection => "no_selection",
            Variant::NoSGate => "no_sgate",
            Variant::NoPGate => "no_pgate",
            Variant::NoConv => "no_conv",
            Variant::SingleTask => "single_task",
        }
    }

    fn has_shared_gate(self) -> bool {
        matches!(
            self,
            Variant::Full | Variant::NoSelection | Variant::NoPGate | Variant::NoConv
        )
    }

    fn has_personal_gate(self) -> bool {
        matches!(
            self,
            Variant::Full | Variant::NoSelection | Variant::NoSGate | Variant::NoConv
        )
    }

    fn has_conv(self) -> bool {
        !matches!(self, Variant::NoConv)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Shape hyperparameters of a model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Metric count `K`.
    pub metrics: usize,
    /// Window length `l`.
    pub window: usize,
    /// Prediction horizon `h`; not used by the network, kept so scoring and
    /// windowing agree with training.
    pub horizon: usize,
    /// Expert count `M`.
    pub experts: usize,
    /// Convolution kernels per expert `N`.
    pub kernels: usize,
    /// Weight of the shared gate.
    pub epsilon: f64,
    pub variant: Variant,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.metrics == 0 {
            bad.push("metrics must be >= 1");
        }
        if self.window == 0 {
            bad.push("window must be >= 1");
        }
        if self.horizon == 0 {
            bad.push("horizon must be >= 1");
        }
        if self.experts == 0 {
            bad.push("experts must be >= 1");
        }
        if self.kernels == 0 {
            bad.push("kernels must be >= 1");
        }
        let blends = self.variant.has_shared_gate() && self.variant.has_personal_gate();
        if blends && !(self.epsilon > 0.5 && self.epsilon <= 1.0) {
            bad.push("epsilon must lie in (0.5, 1]");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join(", ")))
        }
    }

    fn gate_input(&self) -> usize {
        match self.variant {
            Variant::NoSelection => self.metrics * self.window,
            _ => self.window,
        }
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (k, l, m, n) = (self.metrics, self.window, self.experts, self.kernels);
        let (w, hid) = (EMBED_DIM, EXPERT_HIDDEN);
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        if self.variant == Variant::SingleTask {
            out.push(("expert.conv.kernels".into(), vec![k, n, l]));
            out.push(("expert.fc1.weight".into(), vec![k, hid, n]));
            out.push(("expert.fc1.bias".into(), vec![k, hid]));
            out.push(("expert.fc2.weight".into(), vec![k, w, hid]));
            out.push(("expert.fc2.bias".into(), vec![k, w]));
        } else {
            for e in 0..m {
                let fc1_in = if self.variant.has_conv() {
                    out.push((format!("expert.{e}.conv.kernels"), vec![n, l]));
                    n * k
                } else {
                    k * l
                };
                out.push((format!("expert.{e}.fc1.weight"), vec![hid, fc1_in]));
                out.push((format!("expert.{e}.fc1.bias"), vec![hid]));
                out.push((format!("expert.{e}.fc2.weight"), vec![w, hid]));
                out.push((format!("expert.{e}.fc2.bias"), vec![w]));
            }
        }
        let d = self.gate_input();
        if self.variant.has_shared_gate() {
            out.push(("gate.shared".into(), vec![m, d]));
        }
        if self.variant.has_personal_gate() {
            out.push(("gate.personal".into(), vec![k, m, d]));
        }
        out.push(("tower.fc1.weight".into(), vec![k, TOWER_HIDDEN, w]));
        out.push(("tower.fc1.bias".into(), vec![k, TOWER_HIDDEN]));
        out.push(("tower.fc2.weight".into(), vec![k, 1, TOWER_HIDDEN]));
        out.push(("tower.fc2.bias".into(), vec![k, 1]));
        out
    }
}

#[derive(Debug, Clone)]
struct ExpertSlots {
    kernels: Option<usize>,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    experts: Vec<ExpertSlots>,
    shared_gate: Option<usize>,
    personal_gate: Option<usize>,
    tower: [usize; 4],
}

impl Layout {
    fn of(cfg: &ModelConfig) -> Self {
        let mut next = 0usize;
        let mut take = || {
            next += 1;
            next - 1
        };
        let expert_count = if cfg.variant == Variant::SingleTask {
            1
        } else {
            cfg.experts
        };
        let experts = (0..expert_count)
            .map(|_| ExpertSlots {
                kernels: cfg.variant.has_conv().then(&mut take),
                fc1_w: take(),
                fc1_b: take(),
                fc2_w: take(),
                fc2_b: take(),
            })
            .collect();
        let shared_gate = cfg.variant.has_shared_gate().then(&mut take);
        let personal_gate = cfg.variant.has_personal_gate().then(&mut take);
        let tower = [take(), take(), take(), take()];
        Self {
            experts,
            shared_gate,
            personal_gate,
            tower,
        }
    }
}

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct CadModel<T> {
    config: ModelConfig,
    params: Vec<Param<T>>,
    layout: Layout,
}

/// Builds a freshly initialized model. Every weight and bias is drawn from
/// `uniform(-1/√fan_in, 1/√fan_in)` where `fan_in` is the trailing extent.
pub fn build_model<T: Real>(config: ModelConfig, seed: u64) -> Result<CadModel<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    let mut fan_in = 1usize;
    for (name, shape) in config.param_shapes() {
        // a bias shares the fan-in of the weight stored just before it
        if !name.ends_with(".bias") {
            fan_in = *shape.last().unwrap();
        }
        let bound = 1.0 / num_traits::Float::sqrt(fan_in as f64);
        let count = shape.iter().product();
        let data = (0..count)
            .map(|_| T::from_f64(rng.gen_range(-bound..=bound)))
            .collect();
        params.push(Param {
            name,
            value: Tensor::new(&shape, data)?,
        });
    }
    Ok(CadModel {
        layout: Layout::of(&config),
        config,
        params,
    })
}

impl<T: Real> CadModel<T> {
    /// Reassembles a model from stored parameters, checking every name and
    /// shape against `config`.
    pub fn from_params(config: ModelConfig, params: Vec<Param<T>>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != params.len() {
            return Err(Error::Shape {
                context: "parameter count",
                expected: format!("{}", expected.len()),
                actual: format!("{}", params.len()),
            });
        }
        for ((name, shape), p) in expected.iter().zip(&params) {
            if *name != p.name || shape.as_slice() != p.value.shape() {
                return Err(Error::Shape {
                    context: "parameter",
                    expected: format!("{name} {shape:?}"),
                    actual: format!("{} {:?}", p.name, p.value.shape()),
                });
            }
            if !p.value.all_finite() {
                return Err(Error::NonFinite(p.name.clone()));
            }
        }
        Ok(Self {
            layout: Layout::of(&config),
            config,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    pub fn param_tensors(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Overwrites parameter values in storage order. Shapes must not change.
    pub fn set_param_tensors(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(shape_err("parameter count", &[self.params.len()], &[values.len()]));
        }
        for (p, v) in self.params.iter().zip(&values) {
            if p.value.shape() != v.shape() {
                return Err(shape_err("parameter", p.value.shape(), v.shape()));
            }
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> CadModel<U> {
        CadModel {
            config: self.config,
            layout: self.layout.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }

    /// Puts every parameter on `tape` as a trainable leaf.
    pub fn register(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.param(&p.name, p.value.clone()))
            .collect()
    }

    fn register_frozen(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.constant(p.value.clone()))
            .collect()
    }

    fn check_windows(&self, w: &Tensor<T>) -> Result<usize> {
        let (k, l) = (self.config.metrics, self.config.window);
        match w.shape() {
            &[b, wk, wl] if wk == k && wl == l => Ok(b),
            other => Err(shape_err("window batch [B, K, l]", &[0, k, l], other)),
        }
    }

    /// Embeddings of all experts for a batch, each `[B, 128]`; for the
    /// single-task variant a single `[B, K, 128]` node.
    fn expert_nodes(&self, tape: &mut Tape<T>, vars: &[Var], windows: Var) -> Result<Vec<Var>> {
        let cfg = &self.config;
        let (k, l) = (cfg.metrics, cfg.window);
        let b = tape.value(windows).shape()[0];
        if cfg.variant == Variant::SingleTask {
            let s = &self.layout.experts[0];
            let c = tape.grouped_nt(windows, vars[s.kernels.unwrap()])?;
            let c = tape.relu(c);
            let h = tape.grouped_nt(c, vars[s.fc1_w])?;
            let h = tape.add_bias(h, vars[s.fc1_b])?;
            let h = tape.relu(h);
            let e = tape.grouped_nt(h, vars[s.fc2_w])?;
            return Ok(vec![tape.add_bias(e, vars[s.fc2_b])?]);
        }
        let rows = tape.reshape(windows, &[b * k, l])?;
        let flat = tape.reshape(windows, &[b, k * l])?;
        let mut out = Vec::with_capacity(self.layout.experts.len());
        for s in &self.layout.experts {
            let feat = match s.kernels {
                Some(ker) => {
                    let c = tape.matmul_nt(rows, vars[ker])?;
                    let c = tape.relu(c);
                    tape.reshape(c, &[b, k * cfg.kernels])?
                }
                None => flat,
            };
            let h = tape.matmul_nt(feat, vars[s.fc1_w])?;
            let h = tape.add_bias(h, vars[s.fc1_b])?;
            let h = tape.relu(h);
            let e = tape.matmul_nt(h, vars[s.fc2_w])?;
            out.push(tape.add_bias(e, vars[s.fc2_b])?);
        }
        Ok(out)
    }

    /// Gate weights `[B, K, M]` for the gated variants.
    fn gate_node(&self, tape: &mut Tape<T>, vars: &[Var], windows: Var) -> Result<Var> {
        let cfg = &self.config;
        let (k, l, m) = (cfg.metrics, cfg.window, cfg.experts);
        let b = tape.value(windows).shape()[0];
        let input = if cfg.variant == Variant::NoSelection {
            let src = tape.value(windows).data();
            let mut data = Vec::with_capacity(b * k * k * l);
            for sample in src.chunks(k * l) {
                for _ in 0..k {
                    data.extend_from_slice(sample);
                }
            }
            tape.constant(Tensor::new(&[b, k, k * l], data)?)
        } else {
            windows
        };
        let d = cfg.gate_input();
        let shared = match self.layout.shared_gate {
            Some(ws) => {
                let rows = tape.reshape(input, &[b * k, d])?;
                let s = tape.matmul_nt(rows, vars[ws])?;
                Some(tape.reshape(s, &[b, k, m])?)
            }
            None => None,
        };
        let personal = match self.layout.personal_gate {
            Some(wp) => Some(tape.grouped_nt(input, vars[wp])?),
            None => None,
        };
        let eps = T::from_f64(cfg.epsilon);
        let logits = match (shared, personal) {
            (Some(s), Some(p)) => {
                let s = tape.scale(s, eps);
                let p = tape.scale(p, T::one() - eps);
                tape.add(s, p)?
            }
            (Some(s), None) => s,
            (None, Some(p)) => p,
            (None, None) => unreachable!("gate_node called for an ungated variant"),
        };
        Ok(tape.softmax_last(logits))
    }

    /// Records the forward pass for a batch of windows `[B, K, l]` and
    /// returns the predictions node `[B, K]`.
    ///
    /// `vars` must come from [`CadModel::register`] on the same tape. `rng`
    /// draws dropout masks and is only touched in [`Mode::Train`].
    pub fn forward_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        windows: Var,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<Var> {
        let b = self.check_windows(tape.value(windows))?;
        let cfg = &self.config;
        let (k, m) = (cfg.metrics, cfg.experts);
        let experts = self.expert_nodes(tape, vars, windows)?;
        let blended = if cfg.variant == Variant::SingleTask {
            experts[0]
        } else {
            let stacked = tape.stack(&experts)?;
            let gates = if cfg.variant == Variant::NoGate {
                let uniform = T::one() / T::from_f64(m as f64);
                tape.constant(Tensor::full(&[b, k, m], uniform))
            } else {
                self.gate_node(tape, vars, windows)?
            };
            tape.mix(gates, stacked)?
        };

        let [w1, b1, w2, b2] = self.layout.tower.map(|i| vars[i]);
        let h = tape.grouped_nt(blended, w1)?;
        let h = tape.add_bias(h, b1)?;
        let mut h = tape.relu(h);
        if mode == Mode::Train {
            let keep = 1.0 - TOWER_DROPOUT;
            let scale = T::from_f64(1.0 / keep);
            let n = tape.value(h).len();
            let mask = (0..n)
                .map(|_| {
                    if rng.gen::<f64>() < keep {
                        scale
                    } else {
                        T::zero()
                    }
                })
                .collect();
            h = tape.mul_const(h, mask)?;
        }
        let y = tape.grouped_nt(h, w2)?;
        let y = tape.add_bias(y, b2)?;
        tape.reshape(y, &[b, k])
    }

    /// Eval-mode predictions `[B, K]` for windows `[B, K, l]`.
    pub fn predict(&self, windows: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_windows(windows)?;
        let mut tape = Tape::new();
        let vars = self.register_frozen(&mut tape);
        let x = tape.constant(windows.clone());
        let mut unused = rand::rngs::mock::StepRng::new(0, 0);
        let y = self.forward_tape(&mut tape, &vars, x, Mode::Eval, &mut unused)?;
        Ok(tape.value(y).clone())
    }

    /// Predictions for one `K×l` window.
    pub fn forward(&self, window: &Tensor<T>, mode: Mode, rng: &mut dyn RngCore) -> Result<Vec<T>> {
        let (k, l) = (self.config.metrics, self.config.window);
        if window.shape() != [k, l] {
            return Err(shape_err("window", &[k, l], window.shape()));
        }
        let mut tape = Tape::new();
        let vars = self.register_frozen(&mut tape);
        let x = tape.constant(window.clone().reshape(&[1, k, l])?);
        let y = self.forward_tape(&mut tape, &vars, x, mode, rng)?;
        Ok(tape.value(y).data().to_vec())
    }

    /// Embeddings of every expert for windows `[B, K, l]`, one `[B, 128]`
    /// tensor per expert. For the single-task variant the experts are the
    /// `K` per-metric networks.
    pub fn embeddings(&self, windows: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let b = self.check_windows(windows)?;
        let mut tape = Tape::new();
        let vars = self.register_frozen(&mut tape);
        let x = tape.constant(windows.clone());
        let nodes = self.expert_nodes(&mut tape, &vars, x)?;
        if self.config.variant == Variant::SingleTask {
            let all = tape.value(nodes[0]).data();
            let k = self.config.metrics;
            return (0..k)
                .map(|ki| {
                    let mut v = Vec::with_capacity(b * EMBED_DIM);
                    for bi in 0..b {
                        let at = (bi * k + ki) * EMBED_DIM;
                        v.extend_from_slice(&all[at..at + EMBED_DIM]);
                    }
                    Tensor::new(&[b, EMBED_DIM], v)
                })
                .collect();
        }
        Ok(nodes.into_iter().map(|n| tape.value(n).clone()).collect())
    }

    /// Embedding of expert `index` for a single `K×l` window.
    pub fn expert_embedding(&self, index: usize, window: &Tensor<T>) -> Result<Vec<T>> {
        let (k, l) = (self.config.metrics, self.config.window);
        if window.shape() != [k, l] {
            return Err(shape_err("window", &[k, l], window.shape()));
        }
        let all = self.embeddings(&window.clone().reshape(&[1, k, l])?)?;
        all.get(index)
            .map(|t| t.data().to_vec())
            .ok_or_else(|| Error::OutOfRange {
                what: "expert index",
                detail: format!("{index} >= {}", all.len()),
            })
    }

    /// Gate weights for metric `k` (0-based) given its gate input: the
    /// metric's own `l`-window, or the flattened `K·l` window for the
    /// no-selection variant.
    pub fn gate_weights(&self, gate_input: &[T], k: usize) -> Result<Vec<T>> {
        let cfg = &self.config;
        if k >= cfg.metrics {
            return Err(Error::OutOfRange {
                what: "metric index",
                detail: format!("{k} >= {}", cfg.metrics),
            });
        }
        if self.layout.shared_gate.is_none() && self.layout.personal_gate.is_none() {
            return Err(Error::Config(format!("variant {} has no gates", cfg.variant)));
        }
        let d = cfg.gate_input();
        if gate_input.len() != d {
            return Err(shape_err("gate input", &[d], &[gate_input.len()]));
        }
        let m = cfg.experts;
        let matvec = |w: &[T]| -> Vec<T> {
            (0..m)
                .map(|i| w[i * d..(i + 1) * d].iter().zip(gate_input).map(|(&a, &b)| a * b).sum())
                .collect()
        };
        let shared = self.layout.shared_gate.map(|i| matvec(self.params[i].value.data()));
        let personal = self
            .layout
            .personal_gate
            .map(|i| matvec(&self.params[i].value.data()[k * m * d..(k + 1) * m * d]));
        let eps = T::from_f64(cfg.epsilon);
        let logits: Vec<T> = match (shared, personal) {
            (Some(s), Some(p)) => s
                .iter()
                .zip(&p)
                .map(|(&a, &b)| eps * a + (T::one() - eps) * b)
                .collect(),
            (Some(s), None) => s,
            (None, Some(p)) => p,
            (None, None) => unreachable!(),
        };
        crate::tensor::softmax(&logits)
    }
}
