//! Inner-layer and Inter-layer adapters.
//!
//! A [`BottleneckAdapter`] computes `LN(W_up · relu(W_down · v))` row-wise.
//! Used sequentially it acts on the FFN output and keeps its own residual:
//! `FFN(x) + LN(W_up · relu(W_down · FFN(x)))`. Used in parallel it reads
//! the FFN input `x`, and the layer fuses both branches as
//! `LN(FFN(x) + s · z + x)`. The inter-layer adapter maps the
//! softmax-weighted sum of all layer outputs to the embedding width:
//! `LN(relu(W_inter · Σ w_i H_i))`.
//!
//! Every bottleneck adapter starts with `W_up = 0` and a zero LN shift, so
//! its branch outputs exactly zero until training moves it.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Init, Linear, Norm, ParamDecl, ParamSink};
use crate::param::{Component, ParamId, ParamKind, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterVariant {
    Sequential,
    Parallel,
}

/// Scaling of the parallel branch. Written as a number for a fixed scale,
/// `learnable` (start at 1.0) or `learnable:<init>`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ScaleSetting {
    Fixed(f64),
    /// Unconstrained trainable scalar starting at the given value.
    Learnable(f64),
}

pub const LEARNABLE_SCALE_INIT: f64 = 1.0;

impl std::fmt::Display for ScaleSetting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScaleSetting::Fixed(s) => write!(f, "{s:?}"),
            ScaleSetting::Learnable(init) if *init == LEARNABLE_SCALE_INIT => write!(f, "learnable"),
            ScaleSetting::Learnable(init) => write!(f, "learnable:{init:?}"),
        }
    }
}

impl std::str::FromStr for ScaleSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid scale '{s}' (expected a number, 'learnable' or 'learnable:<init>')"));
        let finite = |v: &str| v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(bad);
        match s.strip_prefix("learnable") {
            Some("") => Ok(ScaleSetting::Learnable(LEARNABLE_SCALE_INIT)),
            Some(rest) => Ok(ScaleSetting::Learnable(finite(rest.strip_prefix(':').ok_or_else(bad)?)?)),
            None => Ok(ScaleSetting::Fixed(finite(s)?)),
        }
    }
}

impl From<ScaleSetting> for String {
    fn from(s: ScaleSetting) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for ScaleSetting {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Insertion {
    FfnOnly,
    MhsaAndFfn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InnerAdapterMode {
    pub variant: AdapterVariant,
    pub scale: ScaleSetting,
    pub insertion: Insertion,
}

#[derive(Debug, Clone, Copy)]
pub struct BottleneckAdapter {
    pub down: Linear,
    pub up: Linear,
    pub norm: Norm,
    pub dim: usize,
    pub bottleneck: usize,
}

impl BottleneckAdapter {
    pub fn declare(
        sink: &mut dyn ParamSink,
        name: &str,
        dim: usize,
        bottleneck: usize,
        seed: u64,
    ) -> Self {
        let c = Component::InnerAdapter;
        BottleneckAdapter {
            down: Linear::declare(sink, &format!("{name}.down"), dim, bottleneck, c, seed, false),
            up: Linear::declare(sink, &format!("{name}.up"), bottleneck, dim, c, seed, true),
            norm: Norm::declare(sink, &format!("{name}.norm"), dim, c),
            dim,
            bottleneck,
        }
    }

    /// `LN(W_up · relu(W_down · v))`
    pub fn branch(&self, tape: &mut Tape, store: &ParamStore, v: Var) -> Result<Var> {
        self.check(tape, v)?;
        let h = self.down.forward(tape, store, v)?;
        let h = tape.relu(h);
        let h = self.up.forward(tape, store, h)?;
        self.norm.forward(tape, store, h)
    }

    fn check(&self, tape: &Tape, v: Var) -> Result<()> {
        let s = tape.shape(v);
        if s.len() != 2 || s[1] != self.dim {
            return Err(Error::shape("bottleneck adapter", s, &[self.dim]));
        }
        Ok(())
    }

    pub fn param_ids(&self) -> [ParamId; 6] {
        [
            self.down.weight,
            self.down.bias,
            self.up.weight,
            self.up.bias,
            self.norm.gamma,
            self.norm.beta,
        ]
    }
}

/// Sequential inner-layer adapter on the FFN output, residual included.
pub fn inner_sequential(
    tape: &mut Tape,
    store: &ParamStore,
    ffn_out: Var,
    adapter: &BottleneckAdapter,
) -> Result<Var> {
    let z = adapter.branch(tape, store, ffn_out)?;
    tape.add(ffn_out, z)
}

/// Parallel inner-layer adapter on the FFN input; no internal residual.
pub fn inner_parallel(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    adapter: &BottleneckAdapter,
) -> Result<Var> {
    adapter.branch(tape, store, x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scale {
    Fixed(f64),
    Learnable(ParamId),
}

/// `LN(FFN(x) + s · z + x)` using the layer's own FFN norm.
///
/// The frozen branch and the residual are summed first, so a fixed `s = 0`
/// reproduces the vanilla sub-block bit for bit.
pub fn fuse_parallel(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    ffn_out: Var,
    z: Var,
    scale: Scale,
    norm: &Norm,
) -> Result<Var> {
    let base = tape.add(ffn_out, x)?;
    let scaled = match scale {
        Scale::Fixed(s) => tape.scale(z, s),
        Scale::Learnable(id) => {
            let s = tape.param(store, id);
            tape.mul_scalar(z, s)?
        }
    };
    let sum = tape.add(base, scaled)?;
    norm.forward(tape, store, sum)
}

/// What sits inside one transformer layer.
#[derive(Debug, Clone, Copy, Default)]
pub enum InnerAttachment {
    #[default]
    None,
    Sequential(BottleneckAdapter),
    Parallel {
        adapter: BottleneckAdapter,
        scale: Scale,
    },
    /// Sequential adapters after both MHSA and FFN.
    Houlsby {
        attn: BottleneckAdapter,
        ffn: BottleneckAdapter,
    },
}

impl InnerAttachment {
    pub fn adapter_count(&self) -> usize {
        match self {
            InnerAttachment::None => 0,
            InnerAttachment::Sequential(_) | InnerAttachment::Parallel { .. } => 1,
            InnerAttachment::Houlsby { .. } => 2,
        }
    }

    /// Hook on the attention output before its residual and norm.
    pub fn after_attention(&self, tape: &mut Tape, store: &ParamStore, attn: Var) -> Result<Var> {
        match self {
            InnerAttachment::Houlsby { attn: a, .. } => inner_sequential(tape, store, attn, a),
            _ => Ok(attn),
        }
    }

    /// FFN sub-block output given its input `x` and the frozen `FFN(x)`.
    pub fn ffn_sublayer(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        ffn_out: Var,
        norm: &Norm,
    ) -> Result<Var> {
        match self {
            InnerAttachment::None => {
                let s = tape.add(ffn_out, x)?;
                norm.forward(tape, store, s)
            }
            InnerAttachment::Sequential(a) | InnerAttachment::Houlsby { ffn: a, .. } => {
                let z = inner_sequential(tape, store, ffn_out, a)?;
                let s = tape.add(z, x)?;
                norm.forward(tape, store, s)
            }
            InnerAttachment::Parallel { adapter, scale } => {
                let z = inner_parallel(tape, store, x, adapter)?;
                fuse_parallel(tape, store, x, ffn_out, z, *scale, norm)
            }
        }
    }
}

/// Trainable logits behind the per-layer weights `w = softmax(logits)`.
#[derive(Debug, Clone, Copy)]
pub struct LayerWeights {
    pub logits: ParamId,
    pub num_layers: usize,
}

impl LayerWeights {
    pub fn declare(sink: &mut dyn ParamSink, num_layers: usize) -> Self {
        let logits = sink.declare(ParamDecl {
            name: "layer_weights.logits".into(),
            shape: vec![num_layers],
            component: Component::LayerWeights,
            kind: ParamKind::Scalar,
            init: Init::Zeros,
        });
        LayerWeights { logits, num_layers }
    }

    pub fn weights(&self, store: &ParamStore) -> Vec<f64> {
        crate::autodiff::softmax(store.value(self.logits).data())
    }
}

/// `Σ softmax(logits)_i · H_i`
pub fn weighted_sum(tape: &mut Tape, store: &ParamStore, hs: &[Var], logits: ParamId) -> Result<Var> {
    let n = store.value(logits).len();
    if hs.len() != n {
        return Err(Error::shape("weighted_sum", &[hs.len()], &[n]));
    }
    let l = tape.param(store, logits);
    let w = tape.softmax_rows(l);
    tape.weighted_sum(hs, w)
}

#[derive(Debug, Clone, Copy)]
pub struct InterLayerAdapter {
    pub layer_weights: LayerWeights,
    pub proj: Linear,
    pub norm: Norm,
    pub dim: usize,
    pub embed_dim: usize,
}

impl InterLayerAdapter {
    /// Declares only the projection and norm; the layer weights come from the
    /// caller so weighted-sum and inter modes share one declaration path.
    pub fn declare(
        sink: &mut dyn ParamSink,
        layer_weights: LayerWeights,
        dim: usize,
        embed_dim: usize,
        seed: u64,
    ) -> Self {
        let c = Component::InterAdapter;
        InterLayerAdapter {
            layer_weights,
            proj: Linear::declare(sink, "inter.proj", dim, embed_dim, c, seed, false),
            norm: Norm::declare(sink, "inter.norm", embed_dim, c),
            dim,
            embed_dim,
        }
    }
}

/// `LN(relu(H_sum · W_inter + b_inter))`, `[T × d] → [T × e]`.
pub fn inter_layer_forward(
    tape: &mut Tape,
    store: &ParamStore,
    h_sum: Var,
    adapter: &InterLayerAdapter,
) -> Result<Var> {
    let s = tape.shape(h_sum);
    if s.len() != 2 || s[1] != adapter.dim {
        return Err(Error::shape("inter_layer_forward", s, &[adapter.dim, adapter.embed_dim]));
    }
    let h = adapter.proj.forward(tape, store, h_sum)?;
    let h = tape.relu(h);
    adapter.norm.forward(tape, store, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::layer_norm;
    use crate::rng;
    use crate::tensor::{matmul, Tensor};

    fn randomize(store: &mut ParamStore, ids: &[ParamId], seed: u64) {
        for (k, &id) in ids.iter().enumerate() {
            let shape = store.value(id).shape().to_vec();
            let n: usize = shape.iter().product();
            let mut r = rng::stream(seed, "randomize", &[k as u64]);
            store
                .set_value(id, Tensor::new(shape, rng::gaussian_vec(&mut r, n, 0.7)).unwrap())
                .unwrap();
        }
    }

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut r = rng::stream(seed, "input", &[]);
        Tensor::matrix(rows, cols, rng::gaussian_vec(&mut r, rows * cols, 1.0)).unwrap()
    }

    fn add_row(x: &Tensor, b: &Tensor) -> Tensor {
        let mut out = x.clone();
        let c = x.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b.data()[i % c];
        }
        out
    }

    fn relu(x: &Tensor) -> Tensor {
        let d = x.data().iter().map(|v| v.max(0.0)).collect();
        Tensor::new(x.shape().to_vec(), d).unwrap()
    }

    fn plus(a: &Tensor, b: &Tensor) -> Tensor {
        let d = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        Tensor::new(a.shape().to_vec(), d).unwrap()
    }

    /// Step-by-step evaluation of `LN(W_up relu(W_down v + b) + b)` from raw
    /// tensors.
    fn reference_branch(s: &ParamStore, a: &BottleneckAdapter, v: &Tensor) -> Tensor {
        let h = add_row(&matmul(v, s.value(a.down.weight)).unwrap(), s.value(a.down.bias));
        let h = relu(&h);
        let h = add_row(&matmul(&h, s.value(a.up.weight)).unwrap(), s.value(a.up.bias));
        layer_norm(&h, s.value(a.norm.gamma), s.value(a.norm.beta), 1e-5).unwrap()
    }

    fn run(
        _store: &ParamStore,
        inputs: &[Tensor],
        f: impl FnOnce(&mut Tape, &[Var]) -> Result<Var>,
    ) -> Tensor {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn sequential_identity_at_init() {
        let mut s = ParamStore::new();
        let a = BottleneckAdapter::declare(&mut s, "a", 4, 2, 1);
        let f = rand_matrix(3, 4, 2);
        let out = run(&s, std::slice::from_ref(&f), |t, v| inner_sequential(t, &s, v[0], &a));
        assert_eq!(out, f);
    }

    #[test]
    fn sequential_dead_relu_passes_input() {
        let mut s = ParamStore::new();
        let a = BottleneckAdapter::declare(&mut s, "a", 4, 2, 1);
        randomize(&mut s, &[a.up.weight, a.norm.gamma], 3);
        // all-negative pre-activations through a large negative down bias
        s.set_value(a.down.bias, Tensor::vector(vec![-1e3, -1e3])).unwrap();
        let f = rand_matrix(2, 4, 4);
        let out = run(&s, std::slice::from_ref(&f), |t, v| inner_sequential(t, &s, v[0], &a));
        assert_eq!(out, f);
    }

    #[test]
    fn sequential_matches_reference() {
        let mut s = ParamStore::new();
        let a = BottleneckAdapter::declare(&mut s, "a", 4, 2, 1);
        randomize(&mut s, &a.param_ids(), 5);
        let f = rand_matrix(2, 4, 6);
        let out = run(&s, std::slice::from_ref(&f), |t, v| inner_sequential(t, &s, v[0], &a));
        let want = plus(&f, &reference_branch(&s, &a, &f));
        assert!(out.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn parallel_branch_examples() {
        let mut s = ParamStore::new();
        let a = BottleneckAdapter::declare(&mut s, "a", 4, 2, 1);
        let x = rand_matrix(3, 4, 7);
        let out = run(&s, std::slice::from_ref(&x), |t, v| inner_parallel(t, &s, v[0], &a));
        assert!(out.data().iter().all(|&v| v == 0.0));

        randomize(&mut s, &[a.down.weight, a.up.weight, a.norm.gamma], 8);
        let zero = Tensor::zeros(&[2, 4]);
        let out = run(&s, &[zero], |t, v| inner_parallel(t, &s, v[0], &a));
        assert!(out.data().iter().all(|&v| v == 0.0));

        randomize(&mut s, &a.param_ids(), 9);
        let out = run(&s, std::slice::from_ref(&x), |t, v| inner_parallel(t, &s, v[0], &a));
        assert!(out.max_abs_diff(&reference_branch(&s, &a, &x)) < 1e-12);
    }

    #[test]
    fn fuse_parallel_examples() {
        let mut s = ParamStore::new();
        let norm = Norm::declare(&mut s, "ln", 4, Component::Transformer);
        randomize(&mut s, &[norm.gamma, norm.beta], 10);
        let (x, f, z) = (rand_matrix(2, 4, 11), rand_matrix(2, 4, 12), rand_matrix(2, 4, 13));
        let ins = [x.clone(), f.clone(), z.clone()];

        let fused0 = run(&s, &ins, |t, v| fuse_parallel(t, &s, v[0], v[1], v[2], Scale::Fixed(0.0), &norm));
        let vanilla = run(&s, &ins[..2], |t, v| {
            let sum = t.add(v[1], v[0])?;
            norm.forward(t, &s, sum)
        });
        assert_eq!(fused0, vanilla);

        let fused = run(&s, &ins, |t, v| fuse_parallel(t, &s, v[0], v[1], v[2], Scale::Fixed(0.5), &norm));
        let half_z: Vec<f64> = z.data().iter().map(|v| 0.5 * v).collect();
        let pre = plus(&plus(&f, &Tensor::new(vec![2, 4], half_z).unwrap()), &x);
        let want = layer_norm(&pre, s.value(norm.gamma), s.value(norm.beta), 1e-5).unwrap();
        assert!(fused.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn pre_norm_sum_is_linear_in_scale() {
        let (x, f, z) = (rand_matrix(2, 3, 14), rand_matrix(2, 3, 15), rand_matrix(2, 3, 16));
        let pre = |s: f64| -> Vec<f64> {
            let mut t = Tape::new();
            let (xv, fv, zv) = (t.input(x.clone()), t.input(f.clone()), t.input(z.clone()));
            let base = t.add(fv, xv).unwrap();
            let sz = t.scale(zv, s);
            let out = t.add(base, sz).unwrap();
            t.value(out).data().to_vec()
        };
        let (two, one) = (pre(2.0), pre(1.0));
        for ((a, b), want) in two.iter().zip(&one).zip(z.data()) {
            assert!((a - b - want).abs() < 1e-14);
        }
    }

    #[test]
    fn learnable_scale_receives_gradient() {
        let mut s = ParamStore::new();
        let norm = Norm::declare(&mut s, "ln", 3, Component::Transformer);
        let sid = s.add("s", Tensor::scalar(1.0), Component::Scale, ParamKind::Scalar);
        let mut t = Tape::new();
        let (x, f, z) = (
            t.input(rand_matrix(2, 3, 17)),
            t.input(rand_matrix(2, 3, 18)),
            t.input(rand_matrix(2, 3, 19)),
        );
        let y = fuse_parallel(&mut t, &s, x, f, z, Scale::Learnable(sid), &norm).unwrap();
        let w = t.input(rand_matrix(2, 3, 20));
        let yw = t.mul(y, w).unwrap();
        let loss = t.sum(yw);
        t.backward(loss, &mut s).unwrap();
        assert!(s.get(sid).grad.item().abs() > 0.0);
    }

    #[test]
    fn weighted_sum_examples() {
        let hs: Vec<Tensor> = (0..3).map(|i| rand_matrix(2, 3, 30 + i)).collect();
        let mut s = ParamStore::new();
        let lw = LayerWeights::declare(&mut s, 3);

        let out = run(&s, &hs, |t, v| weighted_sum(t, &s, v, lw.logits));
        let mean: Vec<f64> = (0..6)
            .map(|j| hs.iter().map(|h| h.data()[j]).sum::<f64>() / 3.0)
            .collect();
        for (a, b) in out.data().iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }

        s.set_value(lw.logits, Tensor::vector(vec![0.0, 1e6, 0.0])).unwrap();
        let out = run(&s, &hs, |t, v| weighted_sum(t, &s, v, lw.logits));
        assert!(out.max_abs_diff(&hs[1]) < 1e-9);

        let same = vec![hs[0].clone(); 3];
        s.set_value(lw.logits, Tensor::vector(vec![0.3, -2.0, 1.1])).unwrap();
        let out = run(&s, &same, |t, v| weighted_sum(t, &s, v, lw.logits));
        assert!(out.max_abs_diff(&hs[0]) < 1e-12);

        let err = {
            let mut t = Tape::new();
            let v: Vec<Var> = hs[..2].iter().map(|h| t.input(h.clone())).collect();
            weighted_sum(&mut t, &s, &v, lw.logits)
        };
        assert!(err.is_err());
    }

    #[test]
    fn inter_layer_examples() {
        let mut s = ParamStore::new();
        let lw = LayerWeights::declare(&mut s, 2);
        let a = InterLayerAdapter::declare(&mut s, lw, 8, 6, 3);
        let zero = Tensor::zeros(&[4, 8]);
        let out = run(&s, &[zero], |t, v| inter_layer_forward(t, &s, v[0], &a));
        assert_eq!(out.shape(), &[4, 6]);
        assert!(out.data().iter().all(|&v| v == 0.0));

        randomize(&mut s, &[a.proj.weight, a.proj.bias, a.norm.gamma, a.norm.beta], 21);
        let h = rand_matrix(3, 8, 22);
        let out = run(&s, std::slice::from_ref(&h), |t, v| inter_layer_forward(t, &s, v[0], &a));
        let pre = relu(&add_row(&matmul(&h, s.value(a.proj.weight)).unwrap(), s.value(a.proj.bias)));
        let want = layer_norm(&pre, s.value(a.norm.gamma), s.value(a.norm.beta), 1e-5).unwrap();
        assert_eq!(out.shape(), &[3, 6]);
        assert!(out.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn adapter_rejects_wrong_width() {
        let mut s = ParamStore::new();
        let a = BottleneckAdapter::declare(&mut s, "a", 4, 2, 1);
        let mut t = Tape::new();
        let x = t.input(Tensor::zeros(&[2, 5]));
        assert!(inner_parallel(&mut t, &s, x, &a).is_err());
    }
}
