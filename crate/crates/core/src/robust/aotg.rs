//! Anti-degradation output token generation: two instance normalizations
//! over the token's feature axis (the only axis a token has, so each is a
//! layer normalization with per-entry affine) followed by a two-layer MLP.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::tape::{NodeId, Tape};

use super::super::model::encoder::EMBED_DIM;
use super::super::model::layers::{
    Binder, LayerNormParams, LinearParams, NamedParams, NamedParamsMut,
};

#[derive(Clone, Debug)]
pub struct AotgParams {
    pub norm1: LayerNormParams,
    pub norm2: LayerNormParams,
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl AotgParams {
    pub fn init(rng: &mut Rng) -> Self {
        AotgParams {
            norm1: LayerNormParams::unit(EMBED_DIM),
            norm2: LayerNormParams::unit(EMBED_DIM),
            fc1: LinearParams::init(EMBED_DIM, EMBED_DIM, rng),
            fc2: LinearParams::init(EMBED_DIM, EMBED_DIM, rng),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut NamedParams<'a>) {
        self.norm1.collect(&format!("{prefix}/norm1"), out);
        self.norm2.collect(&format!("{prefix}/norm2"), out);
        self.fc1.collect(&format!("{prefix}/fc1"), out);
        self.fc2.collect(&format!("{prefix}/fc2"), out);
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedParamsMut<'a>) {
        self.norm1.collect_mut(&format!("{prefix}/norm1"), out);
        self.norm2.collect_mut(&format!("{prefix}/norm2"), out);
        self.fc1.collect_mut(&format!("{prefix}/fc1"), out);
        self.fc2.collect_mut(&format!("{prefix}/fc2"), out);
    }

    pub fn bind(&self, b: &mut Binder) -> AotgBound {
        AotgBound {
            norm1: self.norm1.bind(b),
            norm2: self.norm2.bind(b),
            fc1: self.fc1.bind(b),
            fc2: self.fc2.bind(b),
        }
    }
}

#[derive(Clone, Copy)]
pub struct AotgBound {
    norm1: super::super::model::layers::LayerNormBound,
    norm2: super::super::model::layers::LayerNormBound,
    fc1: super::super::model::layers::LinearBound,
    fc2: super::super::model::layers::LinearBound,
}

impl AotgBound {
    /// token: [N,64] -> refined token [N,64].
    pub fn forward(&self, tape: &mut Tape, token: NodeId) -> Result<NodeId> {
        let n1 = self.norm1.forward(tape, token)?;
        let n2 = self.norm2.forward(tape, n1)?;
        let h = self.fc1.forward(tape, n2)?;
        let h = tape.relu(h);
        self.fc2.forward(tape, h)
    }
}
