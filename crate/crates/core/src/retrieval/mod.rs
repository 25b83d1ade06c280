//! Candidate reranking by graph edit distance or by the joint model.

pub mod ged;
pub mod model;
mod tape;

use thiserror::Error;

use crate::embed_index::IndexError;
use crate::scenegraph::SceneGraph;

pub use ged::{ged, GedCosts, GedOutcome, BEAM_WIDTH, DEFAULT_BUDGET, EXACT_NODE_LIMIT};
pub use model::{joint_similarity, train, GraphInput, JointModel, LossParts, ModelConfig, Pooling, TrainingPair};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("no candidates to rerank")]
    NoCandidates,
    #[error("invalid edit costs: {0}")]
    InvalidCosts(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RerankMode {
    Ged,
    Net,
}

impl RerankMode {
    pub fn name(self) -> &'static str {
        match self {
            RerankMode::Ged => "ged",
            RerankMode::Net => "net",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedScene {
    pub scene_id: String,
    /// Edit cost for `Ged`, similarity for `Net`.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub ranked: Vec<RankedScene>,
    pub mode: RerankMode,
}

impl RetrievalResult {
    pub fn top(&self) -> Option<&str> {
        self.ranked.first().map(|r| r.scene_id.as_str())
    }
}

/// Settings shared by every rerank call.
#[derive(Debug, Clone, Copy)]
pub struct RerankOptions<'m> {
    pub mode: RerankMode,
    pub k: usize,
    pub costs: GedCosts,
    pub budget: usize,
    pub model: Option<&'m JointModel>,
}

impl Default for RerankOptions<'_> {
    fn default() -> Self {
        Self {
            mode: RerankMode::Ged,
            k: 5,
            costs: GedCosts::subgraph(),
            budget: DEFAULT_BUDGET,
            model: None,
        }
    }
}

/// Score every candidate against the query and keep the best `k`.
pub fn rerank(query: &SceneGraph, candidates: &[&SceneGraph], opts: &RerankOptions<'_>) -> Result<RetrievalResult, RetrievalError> {
    if candidates.is_empty() {
        return Err(RetrievalError::NoCandidates);
    }
    if query.is_empty() {
        return Err(RetrievalError::EmptyGraph);
    }
    let mut ranked = Vec::with_capacity(candidates.len());
    match opts.mode {
        RerankMode::Ged => {
            for c in candidates {
                let out = ged(query, c, &opts.costs, opts.budget)?;
                ranked.push(RankedScene { scene_id: c.scene_id().to_string(), score: out.cost });
            }
            ranked.sort_by(|a, b| a.score.total_cmp(&b.score).then_with(|| a.scene_id.cmp(&b.scene_id)));
        }
        RerankMode::Net => {
            let model = opts
                .model
                .ok_or_else(|| RetrievalError::Config("mode net requires a model".into()))?;
            let q = model.input(query)?;
            for c in candidates {
                let (t, m) = model.joint_embed_inputs(&q, &model.input(c)?)?;
                ranked.push(RankedScene { scene_id: c.scene_id().to_string(), score: joint_similarity(&t, &m)? });
            }
            ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.scene_id.cmp(&b.scene_id)));
        }
    }
    ranked.truncate(opts.k);
    Ok(RetrievalResult { ranked, mode: opts.mode })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ged::tests::random_graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn candidates(seed: u64, n: usize) -> Vec<SceneGraph> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| random_graph(&mut rng, 7, 4).with_scene_id(format!("s{i:02}")))
            .collect()
    }

    #[test]
    fn query_itself_ranks_first() {
        let cands = candidates(1, 10);
        let refs: Vec<&SceneGraph> = cands.iter().collect();
        let query = cands[6].clone().with_scene_id("q");
        let opts = RerankOptions { costs: GedCosts::default(), ..RerankOptions::default() };
        let res = rerank(&query, &refs, &opts).unwrap();
        assert_eq!(res.ranked[0].score, 0.0);
        assert_eq!(res.ranked.len(), 5);
        // Another candidate might also be isomorphic; ties go to the lower id.
        assert!(res.ranked[0].scene_id.as_str() <= "s06");
    }

    #[test]
    fn ordering_matches_independent_ged_and_prefix() {
        let cands = candidates(2, 10);
        let refs: Vec<&SceneGraph> = cands.iter().collect();
        let query = candidates(3, 1).remove(0);
        let opts = RerankOptions { k: 10, ..RerankOptions::default() };
        let res = rerank(&query, &refs, &opts).unwrap();
        let mut expected: Vec<(f64, String)> = cands
            .iter()
            .map(|c| (ged(&query, c, &GedCosts::subgraph(), DEFAULT_BUDGET).unwrap().cost, c.scene_id().to_string()))
            .collect();
        expected.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let got: Vec<(f64, String)> = res.ranked.iter().map(|r| (r.score, r.scene_id.clone())).collect();
        assert_eq!(got, expected);
        let one = rerank(&query, &refs, &RerankOptions { k: 1, ..opts }).unwrap();
        let five = rerank(&query, &refs, &RerankOptions { k: 5, ..opts }).unwrap();
        assert_eq!(one.ranked[..], five.ranked[..1]);
    }

    #[test]
    fn net_mode_needs_model() {
        let cands = candidates(4, 3);
        let refs: Vec<&SceneGraph> = cands.iter().collect();
        let opts = RerankOptions { mode: RerankMode::Net, ..RerankOptions::default() };
        assert!(matches!(rerank(&cands[0], &refs, &opts), Err(RetrievalError::Config(_))));
        let model = JointModel::new(ModelConfig { hidden: 8, heads: 2, vocab: 16, ..ModelConfig::default() }, 1).unwrap();
        let opts = RerankOptions { model: Some(&model), k: 3, ..opts };
        let res = rerank(&cands[0], &refs, &opts).unwrap();
        assert!(res.ranked.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(rerank(&cands[0], &[], &opts).is_err());
    }
}
