use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, StatUpdate};
use crate::error::Result;
use crate::tensor::{self, ConvSpec, Mode, Tensor};

/// Direct evaluation of a [`Graph`] program with no recording.
pub struct Eager<'p> {
    store: &'p ParamStore,
    mode: Mode,
    rng: ChaCha8Rng,
    stat_updates: Vec<StatUpdate>,
}

impl<'p> Eager<'p> {
    pub fn new(store: &'p ParamStore, mode: Mode, seed: u64) -> Self {
        Self {
            store,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            stat_updates: Vec::new(),
        }
    }

    pub fn stat_updates(&self) -> &[StatUpdate] {
        &self.stat_updates
    }
}

impl Graph for Eager<'_> {
    type Var = Tensor;

    fn param(&mut self, name: &str) -> Result<Tensor> {
        self.store.param(name).cloned()
    }

    fn constant(&mut self, value: Tensor) -> Tensor {
        value
    }

    fn value<'a>(&'a self, var: &'a Tensor) -> &'a Tensor {
        var
    }

    fn conv3d(&mut self, x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
        tensor::conv3d(x, w, b, spec)
    }

    fn conv_transpose3d(
        &mut self,
        x: &Tensor,
        w: &Tensor,
        b: Option<&Tensor>,
        spec: &ConvSpec,
    ) -> Result<Tensor> {
        tensor::conv_transpose3d(x, w, b, spec)
    }

    fn batch_norm(&mut self, x: &Tensor, prefix: &str) -> Result<Tensor> {
        let gamma = self.store.param(&format!("{prefix}.gamma"))?;
        let beta = self.store.param(&format!("{prefix}.beta"))?;
        let mut stats = self.store.running_stats(prefix)?;
        let (out, _) = tensor::batch_norm(x, gamma, beta, &mut stats, self.mode)?;
        if self.mode == Mode::Train {
            self.stat_updates.push(StatUpdate {
                prefix: prefix.to_string(),
                stats,
            });
        }
        Ok(out)
    }

    fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(tensor::activation(x, tensor::Activation::Relu))
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.add(b)
    }

    fn concat_channels(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let refs: Vec<&Tensor> = parts.iter().collect();
        tensor::concat_channels(&refs)
    }

    fn dropout(&mut self, x: &Tensor, rate: f64) -> Result<Tensor> {
        Ok(tensor::dropout(x, rate, &mut self.rng, self.mode)?.0)
    }

    fn softmax_channels(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(tensor::softmax_channels(x))
    }
}
