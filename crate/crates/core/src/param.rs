//! Named parameters with gradient slots and a trainable flag.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which part of the model a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Component {
    Featurizer,
    Transformer,
    InnerAdapter,
    InterAdapter,
    LayerWeights,
    Scale,
    SvHead,
    Classifier,
}

impl Component {
    pub fn is_backbone(self) -> bool {
        matches!(self, Component::Featurizer | Component::Transformer)
    }

    /// SV backend parameters train at the head learning rate.
    pub fn is_head(self) -> bool {
        matches!(self, Component::SvHead | Component::Classifier)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Featurizer => "featurizer",
            Component::Transformer => "transformer",
            Component::InnerAdapter => "inner-adapter",
            Component::InterAdapter => "inter-adapter",
            Component::LayerWeights => "layer-weights",
            Component::Scale => "scale",
            Component::SvHead => "sv-head",
            Component::Classifier => "classifier",
        }
    }
}

/// Bookkeeping category used by the itemized parameter report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    Scalar,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
    pub component: Component,
    pub kind: ParamKind,
}

/// Owns every parameter of a model; modules refer to entries by [`ParamId`].
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        component: Component,
        kind: ParamKind,
    ) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
            trainable: true,
            component,
            kind,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set_value", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn set_trainable_where(&mut self, trainable: bool, pred: impl Fn(&Param) -> bool) {
        for p in &mut self.params {
            if pred(p) {
                p.trainable = trainable;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Little-endian bytes of every backbone parameter in store order.
    pub fn backbone_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for p in self.params.iter().filter(|p| p.component.is_backbone()) {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// 64-bit FNV-1a over [`Self::backbone_bytes`].
    pub fn backbone_hash(&self) -> u64 {
        fnv1a64(&self.backbone_bytes())
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}
