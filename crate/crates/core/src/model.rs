//! An embedder and a head sharing one parameter set.

use crate::config::RunConfig;
use crate::data::NormStats;
use crate::embed::{BnUpdates, EmbedMode, Embedder};
use crate::episodes::{Episode, WayMode};
use crate::error::{Error, Result};
use crate::heads::Head;
use crate::tensor::{Bindings, Graph, ParamSet, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub embedder: Embedder,
    pub head: Head,
    pub params: ParamSet,
    /// Input normalization fitted on the training split.
    pub norm: NormStats,
    /// The configuration that built this model, with `seeds` set to the
    /// single seed used.
    pub config: RunConfig,
}

impl Model {
    pub fn new(cfg: &RunConfig, seed: u64, norm: NormStats) -> Result<Self> {
        let mut params = ParamSet::new();
        let embedder = Embedder::build(&cfg.embedder_config(seed), &mut params)?;
        let head = Head::new(cfg.head_config())?;
        head.init_params(embedder.output_dim(), &mut params)?;
        let mut config = cfg.clone();
        config.seeds = vec![seed];
        Ok(Self {
            embedder,
            head,
            params,
            norm,
            config,
        })
    }

    pub fn seed(&self) -> u64 {
        self.config.seeds[0]
    }

    pub fn way_mode(&self) -> WayMode {
        way_mode_for(&self.head)
    }

    pub fn check_geometry(&self, geometry: (usize, usize, usize)) -> Result<()> {
        let expected = self.embedder.input_geometry();
        if expected != geometry {
            return Err(Error::Geometry {
                expected,
                found: geometry,
            });
        }
        Ok(())
    }

    /// Logits for one episode. Supports and query form a single batch, so
    /// in batch-statistics modes they are normalized together.
    pub fn episode_logits<'g>(
        &self,
        graph: &'g Graph,
        params: &Bindings<'g>,
        ep: &Episode,
        mode: EmbedMode,
    ) -> Result<(Var<'g>, BnUpdates)> {
        self.episode_logits_with(graph, params, ep, None, mode)
    }

    /// As [`Model::episode_logits`], with `background` images `[M, C, H, W]`
    /// appended to the batch. They only contribute batch statistics.
    pub fn episode_logits_with<'g>(
        &self,
        graph: &'g Graph,
        params: &Bindings<'g>,
        ep: &Episode,
        background: Option<&Tensor>,
        mode: EmbedMode,
    ) -> Result<(Var<'g>, BnUpdates)> {
        let k = ep.shots();
        let mut batch = episode_batch(ep)?;
        if let Some(bg) = background {
            let mut shape = batch.shape().to_vec();
            shape[0] += bg.shape()[0];
            let mut data = batch.into_data();
            data.extend_from_slice(bg.data());
            batch = Tensor::new(shape, data)?;
        }
        let batch = graph.constant(batch);
        let (emb, updates) = self.embedder.embed(graph, params, batch, mode)?;
        let d = self.embedder.output_dim();
        let pos = emb.narrow(0, k)?;
        let neg = match &ep.neg_supports {
            Some(n) => Some(emb.narrow(k, n.shape()[0])?),
            None => None,
        };
        let q = emb.narrow(ep.support_count(), 1)?.reshape(&[d])?;
        let logits = self.head.logits(graph, params, pos, neg, q)?;
        Ok((logits, updates))
    }

    /// Logits without gradient tracking.
    pub fn predict(&self, ep: &Episode, mode: EmbedMode) -> Result<[f64; 2]> {
        let graph = Graph::new();
        let bound = Bindings::constants(&graph, &self.params);
        let (logits, _) = self.episode_logits(&graph, &bound, ep, mode)?;
        let v = logits.value();
        Ok([v.data()[0], v.data()[1]])
    }
}

pub fn way_mode_for(head: &Head) -> WayMode {
    if head.kind().is_one_way() {
        WayMode::OneWay
    } else {
        WayMode::TwoWay
    }
}

/// `[pos supports; neg supports; query]` as one `[B, C, H, W]` tensor.
pub fn episode_batch(ep: &Episode) -> Result<Tensor> {
    let image = ep.query.shape().to_vec();
    let mut data = ep.pos_supports.data().to_vec();
    if let Some(n) = &ep.neg_supports {
        data.extend_from_slice(n.data());
    }
    data.extend_from_slice(ep.query.data());
    let mut shape = vec![ep.support_count() + 1];
    shape.extend_from_slice(&image);
    Tensor::new(shape, data)
}

/// Index of the larger logit; ties go to the positive class.
pub fn argmax2(logits: [f64; 2]) -> usize {
    usize::from(logits[1] > logits[0])
}

/// Softmax probability of the positive class.
pub fn positive_probability(logits: [f64; 2]) -> f64 {
    let m = logits[0].max(logits[1]);
    let a = (logits[0] - m).exp();
    let b = (logits[1] - m).exp();
    a / (a + b)
}
