//! The joint video-question / answer embedding transformer.
//!
//! `f(v, q)` embeds projected question-token states and projected video
//! features into one sequence (with fixed sinusoidal positions and learnt
//! modality vectors), runs a multimodal transformer over it and reads the
//! embedding out of the question `[CLS]` position. `g(a)` is an affine map of
//! the answer backbone's `[CLS]` state. Answers are scored by `f(v, q)·g(a)`.

pub mod checkpoint;
mod config;
mod params;

pub use config::VqaTConfig;
pub use params::ParamStore;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, Var};
use crate::encode::{EncodedBatch, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{dot, Matrix};
use params::Init;

/// Whether dropout is active; training mode owns the dropout RNG stream.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone)]
struct Block {
    attn_norm: Norm,
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    ff_norm: Norm,
    ff_in: Linear,
    ff_out: Linear,
}

#[derive(Debug, Clone)]
struct Backbone {
    tokens: ParamId,
    blocks: Vec<Block>,
    final_norm: Norm,
    positions: usize,
    is_question: bool,
}

#[derive(Debug, Clone)]
struct Layout {
    question_backbone: Backbone,
    answer_backbone: Backbone,
    proj_q: Linear,
    norm_q: Norm,
    proj_v: Linear,
    norm_v: Norm,
    mod_q: ParamId,
    mod_v: ParamId,
    fusion: Vec<Block>,
    fusion_norm: Norm,
    readout: Linear,
    answer_proj: Linear,
    mlm: Linear,
    matching: Linear,
}

/// Name prefix of the question-side text backbone inside `f`.
pub const QUESTION_BACKBONE_PREFIX: &str = "f.question_backbone.";
/// Name prefix of the answer backbone inside `g`.
pub const ANSWER_BACKBONE_PREFIX: &str = "g.answer_backbone.";

/// Graph outputs of the video-question branch for one sample.
#[derive(Debug, Clone, Copy)]
pub struct Fused {
    /// `1 × d` joint embedding `f(v, q)`.
    pub embedding: Var,
    /// `l × d` contextualized question positions.
    pub question_states: Var,
}

/// Graph outputs for a whole batch.
#[derive(Debug, Clone)]
pub struct BatchOutputs {
    /// `B × d` rows of `f(vᵢ, qᵢ)`.
    pub fused: Var,
    /// `B × d` rows of `g(aᵢ)`.
    pub answers: Var,
    pub question_states: Vec<Var>,
}

/// Sinusoidal position table: `sin` on even columns, `cos` on odd ones.
pub fn sinusoidal_positions<T: Scalar>(len: usize, width: usize) -> Matrix<T> {
    Matrix::from_fn(len, width, |pos, col| {
        let pair = (col / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / width as f64);
        T::of(if col % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        })
    })
}

/// The joint embedding model with its parameters.
#[derive(Debug, Clone)]
pub struct VqaT<T: Scalar> {
    config: VqaTConfig,
    params: ParamStore<T>,
    layout: Layout,
    positions: Matrix<T>,
    question_text_positions: Matrix<T>,
    answer_text_positions: Matrix<T>,
}

fn add_affine<T: Scalar>(
    store: &mut ParamStore<T>,
    init: &mut Init<'_>,
    weight: &str,
    bias: &str,
    fan_in: usize,
    fan_out: usize,
) -> Linear {
    Linear {
        w: store.add(weight, init.weight(fan_in, fan_out)),
        b: store.add(bias, Matrix::zeros(1, fan_out)),
    }
}

fn add_linear<T: Scalar>(
    store: &mut ParamStore<T>,
    init: &mut Init<'_>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> Linear {
    add_affine(
        store,
        init,
        &format!("{name}.weight"),
        &format!("{name}.bias"),
        fan_in,
        fan_out,
    )
}

fn add_norm<T: Scalar>(store: &mut ParamStore<T>, name: &str, width: usize) -> Norm {
    Norm {
        gamma: store.add(format!("{name}.gamma"), Matrix::filled(1, width, T::one())),
        beta: store.add(format!("{name}.beta"), Matrix::zeros(1, width)),
    }
}

fn add_block<T: Scalar>(
    store: &mut ParamStore<T>,
    init: &mut Init<'_>,
    name: &str,
    width: usize,
    ff: usize,
) -> Block {
    Block {
        attn_norm: add_norm(store, &format!("{name}.attn_norm"), width),
        query: add_linear(store, init, &format!("{name}.attn.query"), width, width),
        key: add_linear(store, init, &format!("{name}.attn.key"), width, width),
        value: add_linear(store, init, &format!("{name}.attn.value"), width, width),
        output: add_linear(store, init, &format!("{name}.attn.output"), width, width),
        ff_norm: add_norm(store, &format!("{name}.ff_norm"), width),
        ff_in: add_linear(store, init, &format!("{name}.ff.in"), width, ff),
        ff_out: add_linear(store, init, &format!("{name}.ff.out"), ff, width),
    }
}

fn add_backbone<T: Scalar>(
    store: &mut ParamStore<T>,
    init: &mut Init<'_>,
    prefix: &str,
    cfg: &VqaTConfig,
    width: usize,
    positions: usize,
) -> Backbone {
    let tokens = store.add(
        format!("{prefix}token_embedding"),
        init.uniform(cfg.vocab_size, width, 0.1),
    );
    let blocks = (0..cfg.backbone_layers)
        .map(|i| {
            add_block(
                store,
                init,
                &format!("{prefix}layers.{i}"),
                width,
                cfg.backbone_ff,
            )
        })
        .collect();
    let final_norm = add_norm(store, &format!("{prefix}final_norm"), width);
    Backbone {
        tokens,
        blocks,
        final_norm,
        positions,
        is_question: prefix == QUESTION_BACKBONE_PREFIX,
    }
}

impl<T: Scalar> VqaT<T> {
    /// Freshly initialized model; initialization is seeded by `config.init_seed`.
    pub fn new(config: VqaTConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut init = Init { rng: &mut rng };
        let mut s = ParamStore::new();
        let c = &config;

        let question_backbone = add_backbone(
            &mut s,
            &mut init,
            QUESTION_BACKBONE_PREFIX,
            c,
            c.d_q,
            c.question_len,
        );
        let proj_q = add_affine(&mut s, &mut init, "f.embed.w_q", "f.embed.b_q", c.d_q, c.d);
        let norm_q = add_norm(&mut s, "f.embed.norm_q", c.d);
        let proj_v = add_affine(&mut s, &mut init, "f.embed.w_v", "f.embed.b_v", c.d_v, c.d);
        let norm_v = add_norm(&mut s, "f.embed.norm_v", c.d);
        let mod_q = s.add("f.embed.mod_q", init.uniform(1, c.d, 0.1));
        let mod_v = s.add("f.embed.mod_v", init.uniform(1, c.d, 0.1));
        let fusion = (0..c.layers)
            .map(|i| {
                add_block(
                    &mut s,
                    &mut init,
                    &format!("f.fusion.layers.{i}"),
                    c.d,
                    c.d_h,
                )
            })
            .collect();
        let fusion_norm = add_norm(&mut s, "f.fusion.final_norm", c.d);
        let readout = add_affine(
            &mut s,
            &mut init,
            "f.readout.w_vq",
            "f.readout.b_vq",
            c.d,
            c.d,
        );
        let answer_backbone = add_backbone(
            &mut s,
            &mut init,
            ANSWER_BACKBONE_PREFIX,
            c,
            c.d_a,
            c.answer_len,
        );
        let answer_proj = add_affine(&mut s, &mut init, "g.w_a", "g.b_a", c.d_a, c.d);
        let mlm = add_linear(&mut s, &mut init, "heads.mlm", c.d, c.vocab_size);
        let matching = add_linear(&mut s, &mut init, "heads.match", c.d, 1);

        let layout = Layout {
            question_backbone,
            answer_backbone,
            proj_q,
            norm_q,
            proj_v,
            norm_v,
            mod_q,
            mod_v,
            fusion,
            fusion_norm,
            readout,
            answer_proj,
            mlm,
            matching,
        };
        Ok(Self {
            positions: sinusoidal_positions(c.question_len + c.video_len, c.d),
            question_text_positions: sinusoidal_positions(c.question_len, c.d_q),
            answer_text_positions: sinusoidal_positions(c.answer_len, c.d_a),
            config,
            params: s,
            layout,
        })
    }

    pub fn config(&self) -> &VqaTConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Switches the language-only variant on or off.
    pub fn set_qa_t(&mut self, on: bool) {
        self.config.qa_t = on;
    }

    /// The fixed `(l + t) × d` position table of the multimodal sequence.
    pub fn positions(&self) -> &Matrix<T> {
        &self.positions
    }

    fn p(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        g.param(id, self.params.get(id))
    }

    fn linear(&self, g: &mut Graph<T>, x: Var, lin: &Linear) -> Result<Var> {
        let w = self.p(g, lin.w);
        let b = self.p(g, lin.b);
        g.affine(x, w, b)
    }

    fn norm(&self, g: &mut Graph<T>, x: Var, n: &Norm) -> Result<Var> {
        let gamma = self.p(g, n.gamma);
        let beta = self.p(g, n.beta);
        g.layer_norm(x, gamma, beta)
    }

    fn dropout(&self, g: &mut Graph<T>, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let p = self.config.dropout;
        let Mode::Train(rng) = mode else { return Ok(x) };
        if p <= 0.0 {
            return Ok(x);
        }
        let (rows, cols) = g.shape(x);
        let keep = T::of(1.0 / (1.0 - p));
        let mask = Matrix::from_fn(rows, cols, |_, _| {
            if rng.gen::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        });
        g.mul_const(x, mask)
    }

    fn attention(
        &self,
        g: &mut Graph<T>,
        x: Var,
        keep: &[bool],
        blk: &Block,
        heads: usize,
    ) -> Result<Var> {
        let width = g.shape(x).1;
        let head_dim = width / heads;
        let q = self.linear(g, x, &blk.query)?;
        let k = self.linear(g, x, &blk.key)?;
        let v = self.linear(g, x, &blk.value)?;
        let scale = T::of(1.0 / (head_dim as f64).sqrt());
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * head_dim, head_dim)?;
            let kh = g.slice_cols(k, h * head_dim, head_dim)?;
            let vh = g.slice_cols(v, h * head_dim, head_dim)?;
            let scores = g.matmul_t(qh, kh)?;
            let scores = g.scale(scores, scale);
            let probs = g.masked_softmax(scores, keep)?;
            outs.push(g.matmul(probs, vh)?);
        }
        let joined = if heads == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        self.linear(g, joined, &blk.output)
    }

    /// Pre-norm residual block.
    fn block(
        &self,
        g: &mut Graph<T>,
        x: Var,
        keep: &[bool],
        blk: &Block,
        heads: usize,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let h = self.norm(g, x, &blk.attn_norm)?;
        let h = self.attention(g, h, keep, blk, heads)?;
        let h = self.dropout(g, h, mode)?;
        let x = g.add(x, h)?;
        let h = self.norm(g, x, &blk.ff_norm)?;
        let h = self.linear(g, h, &blk.ff_in)?;
        let h = g.gelu(h);
        let h = self.linear(g, h, &blk.ff_out)?;
        let h = self.dropout(g, h, mode)?;
        g.add(x, h)
    }

    fn backbone(
        &self,
        g: &mut Graph<T>,
        bb: &Backbone,
        ids: &[u32],
        mask: &[bool],
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        if ids.len() != bb.positions || mask.len() != ids.len() {
            return Err(Error::Shape(format!(
                "text of {} tokens, expected {}",
                ids.len(),
                bb.positions
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::Precondition("text input is entirely padding".into()));
        }
        let table = self.p(g, bb.tokens);
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::Precondition(format!(
                "token id {bad} outside the vocabulary"
            )));
        }
        let emb = g.select_rows(table, &idx)?;
        let positions = if bb.is_question {
            &self.question_text_positions
        } else {
            &self.answer_text_positions
        };
        let pos = g.leaf(positions.clone());
        let mut x = g.add(emb, pos)?;
        x = self.dropout(g, x, mode)?;
        for blk in &bb.blocks {
            x = self.block(g, x, mask, blk, self.config.backbone_heads, mode)?;
        }
        self.norm(g, x, &bb.final_norm)
    }

    fn embed_graph(
        &self,
        g: &mut Graph<T>,
        q_states: Var,
        v_feats: Var,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let c = &self.config;
        if g.shape(q_states) != (c.question_len, c.d_q) || g.shape(v_feats) != (c.video_len, c.d_v)
        {
            return Err(Error::Shape(format!(
                "embed inputs {:?} and {:?}, expected ({}, {}) and ({}, {})",
                g.shape(q_states),
                g.shape(v_feats),
                c.question_len,
                c.d_q,
                c.video_len,
                c.d_v
            )));
        }
        let pos_q = g.leaf(Matrix::from_fn(c.question_len, c.d, |r, col| {
            self.positions.get(r, col)
        }));
        let pos_v = g.leaf(Matrix::from_fn(c.video_len, c.d, |r, col| {
            self.positions.get(c.question_len + r, col)
        }));

        let q = self.linear(g, q_states, &self.layout.proj_q)?;
        let q = g.gelu(q);
        let q = self.norm(g, q, &self.layout.norm_q)?;
        let q = g.add(q, pos_q)?;
        let mod_q = self.p(g, self.layout.mod_q);
        let q = g.add_row(q, mod_q)?;
        let q = self.dropout(g, q, mode)?;

        let v = self.linear(g, v_feats, &self.layout.proj_v)?;
        let v = g.gelu(v);
        let v = self.norm(g, v, &self.layout.norm_v)?;
        let v = g.add(v, pos_v)?;
        let mod_v = self.p(g, self.layout.mod_v);
        let v = g.add_row(v, mod_v)?;
        let v = self.dropout(g, v, mode)?;

        g.concat_rows(&[q, v])
    }

    /// Embeds already-contextualized question tokens (`l × d_q`) and video
    /// features (`t × d_v`) into the `(l + t) × d` multimodal sequence.
    pub fn embed_inputs(
        &self,
        q_states: &Matrix<T>,
        v_feats: &Matrix<T>,
        mode: &mut Mode<'_>,
    ) -> Result<Matrix<T>> {
        let mut g = Graph::new();
        let q = g.leaf(q_states.clone());
        let v = g.leaf(v_feats.clone());
        let out = self.embed_graph(&mut g, q, v, mode)?;
        Ok(g.value(out).clone())
    }

    /// Records `f(v, q)` for one sample.
    pub fn fuse(
        &self,
        g: &mut Graph<T>,
        question_ids: &[u32],
        question_mask: &[bool],
        video: &Matrix<T>,
        video_mask: &[bool],
        mode: &mut Mode<'_>,
    ) -> Result<Fused> {
        let c = &self.config;
        if video.shape() != (c.video_len, c.d_v) || video_mask.len() != c.video_len {
            return Err(Error::Shape(format!(
                "video input {:?}, expected ({}, {})",
                video.shape(),
                c.video_len,
                c.d_v
            )));
        }
        let mut keep: Vec<bool> = question_mask.to_vec();
        let v_leaf = if c.qa_t {
            keep.extend(std::iter::repeat_n(false, c.video_len));
            g.leaf(Matrix::zeros(c.video_len, c.d_v))
        } else {
            keep.extend_from_slice(video_mask);
            g.leaf(video.clone())
        };
        if !keep.iter().any(|&k| k) {
            return Err(Error::Precondition(
                "video-question input is entirely padding".into(),
            ));
        }
        let q_states = self.backbone(
            g,
            &self.layout.question_backbone,
            question_ids,
            question_mask,
            mode,
        )?;
        let mut x = self.embed_graph(g, q_states, v_leaf, mode)?;
        for blk in &self.layout.fusion {
            x = self.block(g, x, &keep, blk, c.heads, mode)?;
        }
        let x = self.norm(g, x, &self.layout.fusion_norm)?;
        let question_rows: Vec<usize> = (0..c.question_len).collect();
        let question_states = g.select_rows(x, &question_rows)?;
        let cls = g.select_rows(x, &[0])?;
        let cls = self.dropout(g, cls, mode)?;
        let embedding = self.linear(g, cls, &self.layout.readout)?;
        Ok(Fused {
            embedding,
            question_states,
        })
    }

    /// Records `g(a)` for one answer.
    pub fn answer(
        &self,
        g: &mut Graph<T>,
        answer_ids: &[u32],
        answer_mask: &[bool],
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let states = self.backbone(
            g,
            &self.layout.answer_backbone,
            answer_ids,
            answer_mask,
            mode,
        )?;
        let cls = g.select_rows(states, &[0])?;
        self.linear(g, cls, &self.layout.answer_proj)
    }

    /// `K × d` answer embeddings, one row per encoded answer.
    pub fn answers(
        &self,
        g: &mut Graph<T>,
        ids: &[Vec<u32>],
        masks: &[Vec<bool>],
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let rows = ids
            .iter()
            .zip(masks)
            .map(|(i, m)| self.answer(g, i, m, mode))
            .collect::<Result<Vec<_>>>()?;
        g.concat_rows(&rows)
    }

    /// MLM logits for the labeled question positions, with their targets.
    pub fn mlm_logits(
        &self,
        g: &mut Graph<T>,
        question_states: Var,
        labels: &[i64],
    ) -> Result<Option<(Var, Vec<usize>)>> {
        let (positions, targets): (Vec<usize>, Vec<usize>) = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != IGNORE_LABEL)
            .map(|(p, &l)| (p, l as usize))
            .unzip();
        if positions.is_empty() {
            return Ok(None);
        }
        let rows = g.select_rows(question_states, &positions)?;
        Ok(Some((self.linear(g, rows, &self.layout.mlm)?, targets)))
    }

    /// `1 × 1` cross-modal matching logit from a joint embedding.
    pub fn match_logit(&self, g: &mut Graph<T>, embedding: Var) -> Result<Var> {
        self.linear(g, embedding, &self.layout.matching)
    }

    /// Records `f` and `g` for every sample of a batch.
    pub fn forward_batch(
        &self,
        g: &mut Graph<T>,
        batch: &EncodedBatch<T>,
        mode: &mut Mode<'_>,
    ) -> Result<BatchOutputs> {
        if batch.is_empty() {
            return Err(Error::Empty("batch without samples".into()));
        }
        let mut fused = Vec::with_capacity(batch.len());
        let mut states = Vec::with_capacity(batch.len());
        let mut answers = Vec::with_capacity(batch.len());
        let mut seen: Vec<(String, Var)> = Vec::new();
        for i in 0..batch.len() {
            let f = self.fuse(
                g,
                &batch.question_ids[i],
                &batch.question_mask[i],
                &batch.video_features[i],
                &batch.video_mask[i],
                mode,
            )?;
            fused.push(f.embedding);
            states.push(f.question_states);
            // Equal answers share one embedding, so duplicates are identical even under dropout.
            let key = batch.answer_strings.get(i).map(|a| a.trim().to_string());
            let cached = key
                .as_ref()
                .and_then(|k| seen.iter().find(|(s, _)| s == k))
                .map(|&(_, v)| v);
            let a = match cached {
                Some(v) => v,
                None => {
                    let v = self.answer(g, &batch.answer_ids[i], &batch.answer_mask[i], mode)?;
                    if let Some(k) = key {
                        seen.push((k, v));
                    }
                    v
                }
            };
            answers.push(a);
        }
        Ok(BatchOutputs {
            fused: g.concat_rows(&fused)?,
            answers: g.concat_rows(&answers)?,
            question_states: states,
        })
    }

    /// Evaluation-mode `f(v, q)`.
    pub fn encode_video_question(
        &self,
        video: &Matrix<T>,
        video_mask: &[bool],
        question_ids: &[u32],
        question_mask: &[bool],
    ) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let f = self.fuse(
            &mut g,
            question_ids,
            question_mask,
            video,
            video_mask,
            &mut Mode::Eval,
        )?;
        Ok(g.value(f.embedding).data().to_vec())
    }

    /// Evaluation-mode `g(a)`.
    pub fn encode_answer(&self, answer_ids: &[u32], answer_mask: &[bool]) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let a = self.answer(&mut g, answer_ids, answer_mask, &mut Mode::Eval)?;
        Ok(g.value(a).data().to_vec())
    }

    /// `K × d` table of evaluation-mode answer embeddings.
    pub fn answer_table(&self, ids: &[Vec<u32>], masks: &[Vec<bool>]) -> Result<Matrix<T>> {
        let rows = ids
            .iter()
            .zip(masks)
            .map(|(i, m)| self.encode_answer(i, m))
            .collect::<Result<Vec<_>>>()?;
        Matrix::from_rows(&rows)
    }

    /// `f(v, q)ᵀ g(a)`.
    pub fn score(
        &self,
        video: &Matrix<T>,
        video_mask: &[bool],
        question_ids: &[u32],
        question_mask: &[bool],
        answer_ids: &[u32],
        answer_mask: &[bool],
    ) -> Result<T> {
        let f = self.encode_video_question(video, video_mask, question_ids, question_mask)?;
        let a = self.encode_answer(answer_ids, answer_mask)?;
        Ok(dot(&f, &a))
    }

    /// Matching logit for a video and a `[CLS] q [SEP] a [SEP]` text of length `l`.
    pub fn match_score(
        &self,
        video: &Matrix<T>,
        video_mask: &[bool],
        pair_ids: &[u32],
        pair_mask: &[bool],
    ) -> Result<T> {
        let mut g = Graph::new();
        let f = self.fuse(
            &mut g,
            pair_ids,
            pair_mask,
            video,
            video_mask,
            &mut Mode::Eval,
        )?;
        let logit = self.match_logit(&mut g, f.embedding)?;
        Ok(g.scalar(logit))
    }
}

/// Contextualizes a padded token sequence into per-token embeddings.
pub trait TextBackbonePort<T: Scalar> {
    fn contextualize(&self, ids: &[u32], mask: &[bool]) -> Result<Matrix<T>>;
}

/// One of the two text backbones of a model, evaluated without dropout.
pub struct BackboneView<'a, T: Scalar> {
    model: &'a VqaT<T>,
    question: bool,
}

impl<T: Scalar> VqaT<T> {
    pub fn question_backbone(&self) -> BackboneView<'_, T> {
        BackboneView {
            model: self,
            question: true,
        }
    }

    pub fn answer_backbone(&self) -> BackboneView<'_, T> {
        BackboneView {
            model: self,
            question: false,
        }
    }
}

impl<T: Scalar> TextBackbonePort<T> for BackboneView<'_, T> {
    fn contextualize(&self, ids: &[u32], mask: &[bool]) -> Result<Matrix<T>> {
        let layout = &self.model.layout;
        let bb = if self.question {
            &layout.question_backbone
        } else {
            &layout.answer_backbone
        };
        let mut g = Graph::new();
        let out = self
            .model
            .backbone(&mut g, bb, ids, mask, &mut Mode::Eval)?;
        Ok(g.value(out).clone())
    }
}

/// `B × K` matrix of dot products between fused rows and answer rows.
pub fn score_matrix<T: Scalar>(fused: &Matrix<T>, answers: &Matrix<T>) -> Result<Matrix<T>> {
    fused.matmul_t(answers)
}
