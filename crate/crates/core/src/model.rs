//! Tuning modes and the assembled verification model: encoder, whatever the
//! mode attaches to it, and the SV head.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapters::{
    inter_layer_forward, weighted_sum, AdapterVariant, BottleneckAdapter, InnerAttachment, InterLayerAdapter,
    LayerWeights, Scale, ScaleSetting,
};
use crate::autodiff::{Tape, Var};
use crate::backbone::{encode_collect, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::head::{pool_and_embed, ClassifierHead, SvHead};
use crate::nn::{Init, ParamCounter, ParamDecl, ParamSink};
use crate::param::{Component, ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TuningMode {
    FullFinetune,
    LinearProbe,
    WeightedSum,
    Houlsby,
    Inner,
    Inter,
    InnerInter,
}

impl TuningMode {
    pub const ALL: [TuningMode; 7] = [
        TuningMode::FullFinetune,
        TuningMode::LinearProbe,
        TuningMode::WeightedSum,
        TuningMode::Houlsby,
        TuningMode::Inner,
        TuningMode::Inter,
        TuningMode::InnerInter,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TuningMode::FullFinetune => "full-finetune",
            TuningMode::LinearProbe => "linear-probe",
            TuningMode::WeightedSum => "weighted-sum",
            TuningMode::Houlsby => "houlsby",
            TuningMode::Inner => "inner",
            TuningMode::Inter => "inter",
            TuningMode::InnerInter => "inner-inter",
        }
    }

    /// Modes that insert bottleneck adapters inside the layers and therefore
    /// take an adapter config.
    pub fn has_inner(self) -> bool {
        matches!(self, TuningMode::Houlsby | TuningMode::Inner | TuningMode::InnerInter)
    }

    pub fn has_inter(self) -> bool {
        matches!(self, TuningMode::Inter | TuningMode::InnerInter)
    }

    pub fn has_layer_weights(self) -> bool {
        matches!(self, TuningMode::WeightedSum | TuningMode::Inter | TuningMode::InnerInter)
    }

    /// Whether any gradient has to flow into the encoder.
    pub fn backprops_through_encoder(self) -> bool {
        self == TuningMode::FullFinetune || self.has_inner()
    }

    /// The freeze policy, `true` when parameters of `component` train.
    pub fn trains(self, component: Component) -> bool {
        match component {
            Component::Featurizer => false,
            Component::Transformer => self == TuningMode::FullFinetune,
            _ => true,
        }
    }
}

impl fmt::Display for TuningMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TuningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TuningMode::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            let names: Vec<&str> = TuningMode::ALL.iter().map(|m| m.as_str()).collect();
            Error::Config(format!("unknown mode '{s}' (expected one of {})", names.join(", ")))
        })
    }
}

impl FromStr for AdapterVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(AdapterVariant::Sequential),
            "parallel" => Ok(AdapterVariant::Parallel),
            _ => Err(Error::Config(format!("unknown adapter variant '{s}' (expected sequential or parallel)"))),
        }
    }
}

impl fmt::Display for AdapterVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdapterVariant::Sequential => "sequential",
            AdapterVariant::Parallel => "parallel",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub bottleneck: usize,
    pub variant: AdapterVariant,
    /// Ignored by the sequential variant.
    pub scale: ScaleSetting,
}

impl AdapterConfig {
    pub fn desk() -> Self {
        AdapterConfig {
            bottleneck: 16,
            variant: AdapterVariant::Parallel,
            scale: ScaleSetting::Fixed(0.5),
        }
    }

    /// Bottleneck 256, parallel, fixed scale 0.5.
    pub fn wavlm_base_plus() -> Self {
        AdapterConfig {
            bottleneck: 256,
            ..Self::desk()
        }
    }

    pub fn validate(&self, hidden_dim: usize) -> Result<()> {
        if self.bottleneck == 0 || self.bottleneck >= hidden_dim {
            return Err(Error::Config(format!(
                "bottleneck {} must satisfy 0 < bottleneck < hidden_dim {hidden_dim}",
                self.bottleneck
            )));
        }
        Ok(())
    }
}

/// Encoder plus everything a tuning mode hangs on it.
#[derive(Debug, Clone)]
pub struct Model {
    pub encoder: Encoder,
    pub mode: Option<TuningMode>,
    pub inner: Vec<InnerAttachment>,
    pub layer_weights: Option<LayerWeights>,
    pub inter: Option<InterLayerAdapter>,
    pub head: Option<SvHead>,
}

impl Model {
    pub fn new(encoder: Encoder) -> Self {
        Model {
            encoder,
            mode: None,
            inner: Vec::new(),
            layer_weights: None,
            inter: None,
            head: None,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.encoder.config
    }

    /// Declare the mode's adapters and the SV head. Parameter names are
    /// stable across modes, so a component shared by two modes gets the
    /// same initial values in both.
    pub fn attach(
        &mut self,
        sink: &mut dyn ParamSink,
        mode: TuningMode,
        adapter: Option<&AdapterConfig>,
        embed_dim: usize,
        seed: u64,
    ) -> Result<()> {
        if self.mode.is_some() {
            return Err(Error::Contract("model already has a tuning mode attached".into()));
        }
        let cfg = self.encoder.config.clone();
        let d = cfg.hidden_dim;
        if embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        match (mode.has_inner(), adapter) {
            (true, None) => return Err(Error::Config(format!("mode {mode} needs an adapter config"))),
            (false, Some(_)) => return Err(Error::Config(format!("mode {mode} takes no adapter config"))),
            (true, Some(a)) => {
                a.validate(d)?;
                if mode == TuningMode::Houlsby && a.variant != AdapterVariant::Sequential {
                    return Err(Error::Config("houlsby adapters are sequential".into()));
                }
            }
            (false, None) => {}
        }
        if let Some(a) = adapter {
            self.inner = (0..cfg.num_layers)
                .map(|i| inner_attachment(sink, mode, a, i, d, seed))
                .collect();
        }
        if mode.has_layer_weights() {
            self.layer_weights = Some(LayerWeights::declare(sink, cfg.num_layers));
        }
        if mode.has_inter() {
            let lw = self.layer_weights.expect("declared above");
            self.inter = Some(InterLayerAdapter::declare(sink, lw, d, embed_dim, seed));
        }
        let in_dim = if self.inter.is_some() { embed_dim } else { d };
        self.head = Some(SvHead::declare(sink, in_dim, embed_dim, seed));
        self.mode = Some(mode);
        Ok(())
    }

    pub fn mode(&self) -> Result<TuningMode> {
        self.mode
            .ok_or_else(|| Error::Contract("no tuning mode attached".into()))
    }

    pub fn head(&self) -> Result<&SvHead> {
        self.head
            .as_ref()
            .ok_or_else(|| Error::Contract("no SV head attached".into()))
    }

    /// Number of inserted adapter modules; the inter-layer adapter counts as one.
    pub fn adapter_count(&self) -> usize {
        self.inner.iter().map(|a| a.adapter_count()).sum::<usize>() + usize::from(self.inter.is_some())
    }

    /// Set every trainable flag in `store` from the mode's freeze policy.
    pub fn apply_trainable(&self, store: &mut ParamStore) -> Result<()> {
        let mode = self.mode()?;
        for c in COMPONENTS {
            store.set_trainable_where(mode.trains(c), |p| p.component == c);
        }
        Ok(())
    }

    /// Which layer outputs [`Model::embed_from_layers`] reads.
    pub fn layers_needed(&self) -> Result<std::ops::Range<usize>> {
        let n = self.encoder.config.num_layers;
        Ok(if self.mode()?.has_layer_weights() { 0..n } else { n - 1..n })
    }

    /// `[T × ·]` sequence fed to the head: the last layer output, or the
    /// weighted sum of all of them, optionally through the inter adapter.
    /// `hs` holds the layers in [`Model::layers_needed`].
    pub fn representation(&self, tape: &mut Tape, store: &ParamStore, hs: &[Var]) -> Result<Var> {
        let expected = self.layers_needed()?.len();
        if hs.len() != expected {
            return Err(Error::shape("representation", &[hs.len()], &[expected]));
        }
        let Some(lw) = self.layer_weights else {
            return Ok(hs[0]);
        };
        let h = weighted_sum(tape, store, hs, lw.logits)?;
        match &self.inter {
            Some(inter) => inter_layer_forward(tape, store, h, inter),
            None => Ok(h),
        }
    }

    pub fn embed_from_layers(&self, tape: &mut Tape, store: &ParamStore, hs: &[Var]) -> Result<Var> {
        let r = self.representation(tape, store, hs)?;
        pool_and_embed(tape, store, r, self.head()?)
    }

    /// Frames `[T × input_dim]` to a `[1 × e]` embedding.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, frames: &Tensor) -> Result<Var> {
        let hs = encode_collect(tape, store, &self.encoder, &self.inner, frames)?;
        let range = self.layers_needed()?;
        self.embed_from_layers(tape, store, &hs[range])
    }

    /// Embedding values, evaluated on a scratch tape.
    pub fn embed_values(&self, store: &ParamStore, frames: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let e = self.embed(&mut tape, store, frames)?;
        Ok(tape.value(e).data().to_vec())
    }
}

const COMPONENTS: [Component; 8] = [
    Component::Featurizer,
    Component::Transformer,
    Component::InnerAdapter,
    Component::InterAdapter,
    Component::LayerWeights,
    Component::Scale,
    Component::SvHead,
    Component::Classifier,
];

fn inner_attachment(
    sink: &mut dyn ParamSink,
    mode: TuningMode,
    a: &AdapterConfig,
    layer: usize,
    d: usize,
    seed: u64,
) -> InnerAttachment {
    let prefix = format!("encoder.{layer}.adapter");
    if mode == TuningMode::Houlsby {
        return InnerAttachment::Houlsby {
            attn: BottleneckAdapter::declare(sink, &format!("{prefix}_attn"), d, a.bottleneck, seed),
            ffn: BottleneckAdapter::declare(sink, &prefix, d, a.bottleneck, seed),
        };
    }
    let adapter = BottleneckAdapter::declare(sink, &prefix, d, a.bottleneck, seed);
    match a.variant {
        AdapterVariant::Sequential => InnerAttachment::Sequential(adapter),
        AdapterVariant::Parallel => {
            let scale = match a.scale {
                ScaleSetting::Fixed(s) => Scale::Fixed(s),
                ScaleSetting::Learnable(init) => Scale::Learnable(sink.declare(ParamDecl {
                    name: format!("{prefix}.scale"),
                    shape: vec![1],
                    component: Component::Scale,
                    kind: ParamKind::Scalar,
                    init: Init::Value(init),
                })),
            };
            InnerAttachment::Parallel { adapter, scale }
        }
    }
}

/// Encoder and attached model over a fresh store with the freeze policy
/// applied. `classifier` adds a training-only speaker classifier.
pub fn build_model(
    encoder: &EncoderConfig,
    mode: TuningMode,
    adapter: Option<&AdapterConfig>,
    embed_dim: usize,
    seed: u64,
    classifier: Option<usize>,
) -> Result<(Model, Option<ClassifierHead>, ParamStore)> {
    let (enc, mut store) = Encoder::build(encoder)?;
    let mut model = Model::new(enc);
    model.attach(&mut store, mode, adapter, embed_dim, seed)?;
    let clf = classifier.map(|s| ClassifierHead::declare(&mut store, embed_dim, s, seed));
    model.apply_trainable(&mut store)?;
    Ok((model, clf, store))
}

/// Parameter counts split by bookkeeping category.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Itemized {
    pub weights: usize,
    pub biases: usize,
    pub norms: usize,
    pub scalars: usize,
}

impl Itemized {
    pub fn total(&self) -> usize {
        self.weights + self.biases + self.norms + self.scalars
    }

    fn add(&mut self, kind: ParamKind, n: usize) {
        match kind {
            ParamKind::Weight => self.weights += n,
            ParamKind::Bias => self.biases += n,
            ParamKind::Norm => self.norms += n,
            ParamKind::Scalar => self.scalars += n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamCount {
    pub mode: TuningMode,
    /// Featurizer plus transformer stack; the basis of `percent_of_backbone`.
    pub backbone_total: usize,
    pub backbone_trainable: usize,
    /// Trainable parameters outside the backbone and SV backend: adapters,
    /// layer weights, learnable scales.
    pub added_trainable: usize,
    /// `(backbone_trainable + added_trainable) / backbone_total · 100`.
    pub percent_of_backbone: f64,
    pub head_trainable: usize,
    pub adapter_modules: usize,
    /// Trainable parameters per component, itemized.
    pub components: BTreeMap<Component, Itemized>,
}

impl ParamCount {
    /// The tuned-parameter figure: everything trainable except the SV backend.
    pub fn tuned(&self) -> usize {
        self.backbone_trainable + self.added_trainable
    }
}

/// Exact parameter accounting without allocating any tensor.
pub fn count_trainable(
    encoder: &EncoderConfig,
    mode: TuningMode,
    adapter: Option<&AdapterConfig>,
    embed_dim: usize,
) -> Result<ParamCount> {
    let mut counter = ParamCounter::default();
    let enc = Encoder::declare(&mut counter, encoder)?;
    let mut model = Model::new(enc);
    model.attach(&mut counter, mode, adapter, embed_dim, 0)?;
    let mut components: BTreeMap<Component, Itemized> = BTreeMap::new();
    let mut backbone_total = 0;
    for decl in &counter.decls {
        if decl.component.is_backbone() {
            backbone_total += decl.numel();
        }
        if mode.trains(decl.component) {
            components.entry(decl.component).or_default().add(decl.kind, decl.numel());
        }
    }
    let sum = |pred: fn(Component) -> bool| -> usize {
        components
            .iter()
            .filter(|(c, _)| pred(**c))
            .map(|(_, i)| i.total())
            .sum()
    };
    let backbone_trainable = sum(Component::is_backbone);
    let head_trainable = sum(Component::is_head);
    let added_trainable = sum(|c| !c.is_backbone() && !c.is_head());
    Ok(ParamCount {
        mode,
        backbone_total,
        backbone_trainable,
        added_trainable,
        percent_of_backbone: 100.0 * (backbone_trainable + added_trainable) as f64 / backbone_total as f64,
        head_trainable,
        adapter_modules: model.adapter_count(),
        components,
    })
}
