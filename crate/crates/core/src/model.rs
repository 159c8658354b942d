//! The full relation-extraction model: encoder, pair matrix, criss-cross
//! block and classifier, plus its per-document losses and predictions.

use crate::ccnet::{clustering_stats, dense_forward, DenseBlock, DenseConfig, DenseOutput};
use crate::document::PairLabels;
use crate::encoding::{EncodedDocument, Encoder, EncoderConfig, MarkedDocument};
use crate::error::Result;
use crate::heads::{
    atl_loss, atl_predict, bias_loss, classify, clustering_loss, total_loss, Classifier, ClassifierConfig,
    ClusteringConfig, LossSwitches,
};
use crate::pair_matrix::{build_matrix, PairFeatures};
use crate::tensor::init::Rng64;
use crate::tensor::{Graph, ParamStore, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub num_relations: usize,
    pub encoder: EncoderConfig,
    pub block: DenseConfig,
    pub z_dim: usize,
    pub groups: usize,
    pub normalize_context: bool,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub pair: PairFeatures,
    pub block: DenseBlock,
    pub classifier: Classifier,
}

/// Graph handles produced by one document's forward pass.
#[derive(Clone, Debug)]
pub struct DocForward {
    pub n: usize,
    pub encoded: EncodedDocument,
    pub dense: DenseOutput,
    /// Flat `s·n + o` index of each logit row.
    pub pairs: Vec<usize>,
    /// `[pairs.len(), R + 1]`.
    pub logits: Var,
    /// Per layer, `[n², 1]` bias probabilities.
    pub bias_probs: Vec<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub adap: Var,
    pub bias: Option<Var>,
    pub cluster: Option<Var>,
    pub total: Var,
}

impl Model {
    pub fn new(store: &mut ParamStore, rng: &mut Rng64, config: ModelConfig) -> Result<Self> {
        let encoder = Encoder::new(store, rng, config.vocab_size, config.encoder.clone())?;
        let h = config.encoder.hidden;
        let d = config.block.dim;
        let pair = PairFeatures::new(store, rng, h, d, config.normalize_context);
        let block = DenseBlock::new(store, rng, config.block.clone());
        let classifier = Classifier::new(
            store,
            rng,
            ClassifierConfig {
                hidden: h,
                dim: d,
                z_dim: config.z_dim,
                num_relations: config.num_relations,
                groups: config.groups,
            },
        )?;
        Ok(Model {
            config,
            encoder,
            pair,
            block,
            classifier,
        })
    }

    /// Encoder, pair matrix and criss-cross block, for documents with at
    /// least one entity.
    pub fn forward_block(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        marked: &MarkedDocument,
    ) -> Result<(EncodedDocument, DenseOutput)> {
        let encoded = self.encoder.encode(g, store, marked)?;
        let m = build_matrix(g, store, &self.pair, &encoded)?;
        let dense = dense_forward(g, store, &self.block, m)?;
        Ok((encoded, dense))
    }

    /// Runs the model on one marked document. Documents with fewer than two
    /// entities have no pair to classify and yield `None`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, marked: &MarkedDocument) -> Result<Option<DocForward>> {
        let n = marked.marker_index.len();
        if n < 2 {
            return Ok(None);
        }
        let (encoded, dense) = self.forward_block(g, store, marked)?;
        let pairs: Vec<usize> = (0..n * n).filter(|p| p / n != p % n).collect();
        let emb = encoded.entity_emb.expect("n >= 2");
        let subj: Vec<usize> = pairs.iter().map(|p| p / n).collect();
        let obj: Vec<usize> = pairs.iter().map(|p| p % n).collect();
        let h_es = g.gather(emb, &subj)?;
        let h_eo = g.gather(emb, &obj)?;
        let feats = g.gather(dense.m.m, &pairs)?;
        let logits = classify(g, store, &self.classifier, h_es, h_eo, feats)?;
        let mut bias_probs = Vec::new();
        for layer in &dense.layers {
            if let Some(b) = layer.bias_logits {
                bias_probs.push(g.sigmoid(b)?);
            }
        }
        Ok(Some(DocForward {
            n,
            encoded,
            dense,
            pairs,
            logits,
            bias_probs,
        }))
    }

    pub fn loss(
        &self,
        g: &mut Graph,
        fwd: &DocForward,
        labels: &PairLabels,
        clustering: &ClusteringConfig,
        switches: LossSwitches,
    ) -> Result<LossTerms> {
        let gold: Vec<&[usize]> = fwd.pairs.iter().map(|&p| labels.relations[p].as_slice()).collect();
        let adap = atl_loss(g, fwd.logits, &gold)?;
        let bias = if switches.bias && !fwd.bias_probs.is_empty() {
            Some(bias_loss(g, &fwd.bias_probs, labels)?)
        } else {
            None
        };
        let cluster = if switches.cluster {
            match clustering_stats(g, fwd.dense.m.m, labels)? {
                Some(stats) => Some(clustering_loss(g, &stats, fwd.dense.m.m, clustering)?.total),
                None => None,
            }
        } else {
            None
        };
        let total = total_loss(g, adap, bias, cluster, switches)?;
        Ok(LossTerms {
            adap,
            bias,
            cluster,
            total,
        })
    }

    /// Predicted `(s, o, relation)` triples.
    pub fn predict(&self, g: &Graph, fwd: &DocForward) -> Vec<(usize, usize, usize)> {
        let logits = g.value(fwd.logits);
        let mut out = Vec::new();
        for (row, &p) in fwd.pairs.iter().enumerate() {
            for r in atl_predict(logits.row(row)) {
                out.push((p / fwd.n, p % fwd.n, r));
            }
        }
        out
    }
}
