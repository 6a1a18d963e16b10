//! Transformer decoder over the unified voxel space.
//!
//! Each block runs query self-attention, 3D deformable cross-attention into
//! the volume and a feed-forward layer (each followed by residual + layer
//! norm), then applies a head shared by all blocks. The head's centre branch
//! also refines the reference points in logit space for the next block.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    add, affine, concat_last, deformable_sample, layer_norm, matmul, relu, reshape, scale, sigmoid,
    sigmoid_scalar, slice_last, softmax, transpose, DeformLayout, ParamId, ParamStore, Tape, Tensor, Var,
};
use crate::scene::{normalize_yaw, Box3D};
use crate::{GridSpec, Real, Rng};

/// Width of the box branch: centre delta (3), log-size (3), sin, cos, vx, vy.
pub const BOX_PARAMS: usize = 10;
const LN_EPS: Real = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub queries: usize,
    pub blocks: usize,
    pub heads: usize,
    pub points: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub ffn_hidden: usize,
    /// Stop gradients through the reference update between blocks.
    pub detach_references: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            queries: 32,
            blocks: 2,
            heads: 4,
            points: 4,
            channels: 32,
            num_classes: 10,
            ffn_hidden: 64,
            detach_references: false,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.queries == 0 || self.blocks == 0 || self.points == 0 || self.num_classes == 0 || self.ffn_hidden == 0 {
            return Err(Error::argument("decoder queries, blocks, points, classes and ffn width must be >= 1"));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::argument(format!(
                "{} heads do not divide {} channels",
                self.heads, self.channels
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore<Real>, name: &str, i: usize, o: usize, std: f64, rng: &mut Rng) -> Self {
        Linear {
            w: store.add(format!("{name}.w"), Tensor::random_normal(&[i, o], std, rng)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[o])),
        }
    }

    fn xavier(store: &mut ParamStore<Real>, name: &str, i: usize, o: usize, rng: &mut Rng) -> Self {
        Self::new(store, name, i, o, (2.0 / (i + o) as f64).sqrt(), rng)
    }

    pub fn forward(&self, tape: &mut Tape<Real>, store: &ParamStore<Real>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        affine(tape, x, w, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore<Real>, name: &str, c: usize) -> Self {
        Norm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[c])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c])),
        }
    }

    pub fn forward(&self, tape: &mut Tape<Real>, store: &ParamStore<Real>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        layer_norm(tape, x, g, b, LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub norm: Norm,
}

#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub offsets: Linear,
    pub weights: Linear,
    pub out: Linear,
    pub norm: Norm,
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub hidden: Linear,
    pub out: Linear,
    pub norm: Norm,
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub self_attn: SelfAttention,
    pub cross_attn: CrossAttention,
    pub ffn: FeedForward,
}

/// Classification and box MLPs shared by every block.
#[derive(Clone, Debug)]
pub struct SharedHead {
    pub cls_hidden: Linear,
    pub cls_out: Linear,
    pub box_hidden: Linear,
    pub box_out: Linear,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub query_embed: ParamId,
    pub reference: Linear,
    pub blocks: Vec<BlockParams>,
    pub head: SharedHead,
}

/// A query embedding and its normalized reference point.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectQuery {
    pub embedding: Vec<Real>,
    pub reference: [Real; 3],
}

/// Head outputs of one block.
#[derive(Clone, Copy, Debug)]
pub struct BlockPrediction {
    /// `[N, classes]`
    pub cls_logits: Var,
    /// `[N, 10]` raw box branch.
    pub box_params: Var,
    /// `[N, 3]` refined normalized reference `p'`.
    pub reference: Var,
    /// `[N, 10]` regression encoding: `p'`, log-size, sin, cos, velocity.
    pub encoded: Var,
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    pub initial_reference: Var,
    pub blocks: Vec<BlockPrediction>,
}

impl DecoderOutput {
    pub fn last(&self) -> &BlockPrediction {
        self.blocks.last().expect("decoder has at least one block")
    }
}

impl Decoder {
    pub fn new(store: &mut ParamStore<Real>, config: DecoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let (h, k) = (config.heads, config.points);
        let query_embed = store.add("decoder.query_embed", Tensor::random_normal(&[config.queries, c], 1.0, rng));
        let reference = Linear::xavier(store, "decoder.reference", c, 3, rng);
        let blocks = (0..config.blocks)
            .map(|i| {
                let p = format!("decoder.block{i}");
                let offsets = Linear::new(store, &format!("{p}.cross.offsets"), c, h * k * 3, 1e-3, rng);
                // sampling points start on a small ring around the reference, one direction per head
                let ring = &mut store.get_mut(offsets.b).value;
                for hh in 0..h {
                    let th = 2.0 * std::f64::consts::PI * hh as f64 / h as f64;
                    for kk in 0..k {
                        let r = 0.02 * (kk + 1) as f64;
                        let o = (hh * k + kk) * 3;
                        ring.data_mut()[o] = r * th.cos();
                        ring.data_mut()[o + 1] = r * th.sin();
                    }
                }
                BlockParams {
                    self_attn: SelfAttention {
                        q: Linear::xavier(store, &format!("{p}.self.q"), c, c, rng),
                        k: Linear::xavier(store, &format!("{p}.self.k"), c, c, rng),
                        v: Linear::xavier(store, &format!("{p}.self.v"), c, c, rng),
                        out: Linear::xavier(store, &format!("{p}.self.out"), c, c, rng),
                        norm: Norm::new(store, &format!("{p}.self.norm"), c),
                    },
                    cross_attn: CrossAttention {
                        offsets,
                        weights: Linear::xavier(store, &format!("{p}.cross.weights"), c, h * k, rng),
                        out: Linear::xavier(store, &format!("{p}.cross.out"), c, c, rng),
                        norm: Norm::new(store, &format!("{p}.cross.norm"), c),
                    },
                    ffn: FeedForward {
                        hidden: Linear::xavier(store, &format!("{p}.ffn.hidden"), c, config.ffn_hidden, rng),
                        out: Linear::xavier(store, &format!("{p}.ffn.out"), config.ffn_hidden, c, rng),
                        norm: Norm::new(store, &format!("{p}.ffn.norm"), c),
                    },
                }
            })
            .collect();
        let head = SharedHead {
            cls_hidden: Linear::xavier(store, "head.cls.hidden", c, c, rng),
            cls_out: Linear::new(store, "head.cls.out", c, config.num_classes, 0.01, rng),
            box_hidden: Linear::xavier(store, "head.box.hidden", c, c, rng),
            box_out: Linear::new(store, "head.box.out", c, BOX_PARAMS, 0.01, rng),
        };
        // prior probability 0.01 per class
        store.get_mut(head.cls_out.b).value.fill(-(99.0f64).ln());
        Ok(Decoder {
            config,
            query_embed,
            reference,
            blocks,
            head,
        })
    }

    /// Reference logits `affine(embedding)`; the reference point is their sigmoid.
    pub fn reference_logits(&self, tape: &mut Tape<Real>, store: &ParamStore<Real>, embed: Var) -> Result<Var> {
        self.reference.forward(tape, store, embed)
    }

    /// Runs all blocks from the stored query embeddings.
    pub fn forward(&self, tape: &mut Tape<Real>, store: &ParamStore<Real>, volume: Var) -> Result<DecoderOutput> {
        let embed = tape.param(store, self.query_embed);
        self.forward_from(tape, store, embed, volume)
    }

    /// Runs all blocks from explicit embeddings `[N, C]`.
    pub fn forward_from(&self, tape: &mut Tape<Real>, store: &ParamStore<Real>, embed: Var, volume: Var) -> Result<DecoderOutput> {
        let c = self.config.channels;
        let vs = tape.shape(volume).to_vec();
        if vs.len() != 4 || vs[3] != c {
            return Err(Error::Shape {
                op: "decoder volume",
                expected: vec![0, 0, 0, c],
                got: vs,
            });
        }
        if tape.shape(embed).len() != 2 || tape.shape(embed)[1] != c {
            return Err(Error::Shape {
                op: "decoder queries",
                expected: vec![self.config.queries, c],
                got: tape.shape(embed).to_vec(),
            });
        }
        let mut ref_logit = self.reference_logits(tape, store, embed)?;
        let initial_reference = sigmoid(tape, ref_logit);
        let mut reference = initial_reference;
        let mut x = embed;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            x = self_attention(tape, store, &block.self_attn, self.config.heads, x)?;
            let attended = deformable_cross_attention(tape, store, &block.cross_attn, &self.config, x, reference, volume)?;
            let s = add(tape, x, attended)?;
            x = block.cross_attn.norm.forward(tape, store, s)?;
            x = feed_forward(tape, store, &block.ffn, x)?;
            let (cls_logits, box_params) = self.head_forward(tape, store, x)?;
            let delta = slice_last(tape, box_params, 0, 3)?;
            let base = if self.config.detach_references {
                tape.detach(ref_logit)
            } else {
                ref_logit
            };
            ref_logit = add(tape, base, delta)?;
            reference = sigmoid(tape, ref_logit);
            let rest = slice_last(tape, box_params, 3, BOX_PARAMS - 3)?;
            let encoded = concat_last(tape, &[reference, rest])?;
            blocks.push(BlockPrediction {
                cls_logits,
                box_params,
                reference,
                encoded,
            });
        }
        Ok(DecoderOutput {
            initial_reference,
            blocks,
        })
    }

    pub fn head_forward(&self, tape: &mut Tape<Real>, store: &ParamStore<Real>, x: Var) -> Result<(Var, Var)> {
        let h = &self.head;
        let a = h.cls_hidden.forward(tape, store, x)?;
        let a = relu(tape, a);
        let cls = h.cls_out.forward(tape, store, a)?;
        let b = h.box_hidden.forward(tape, store, x)?;
        let b = relu(tape, b);
        let bx = h.box_out.forward(tape, store, b)?;
        Ok((cls, bx))
    }
}

/// Multi-head scaled dot-product self-attention over the query set, plus
/// residual and layer norm.
pub fn self_attention(tape: &mut Tape<Real>, store: &ParamStore<Real>, p: &SelfAttention, heads: usize, x: Var) -> Result<Var> {
    let c = tape.shape(x)[1];
    let hd = c / heads;
    let q = p.q.forward(tape, store, x)?;
    let k = p.k.forward(tape, store, x)?;
    let v = p.v.forward(tape, store, x)?;
    let inv = 1.0 / (hd as Real).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = slice_last(tape, q, h * hd, hd)?;
        let kh = slice_last(tape, k, h * hd, hd)?;
        let vh = slice_last(tape, v, h * hd, hd)?;
        let kt = transpose(tape, kh)?;
        let s = matmul(tape, qh, kt)?;
        let s = scale(tape, s, inv);
        let a = softmax(tape, s, 1)?;
        outs.push(matmul(tape, a, vh)?);
    }
    let o = concat_last(tape, &outs)?;
    let o = p.out.forward(tape, store, o)?;
    let s = add(tape, x, o)?;
    p.norm.forward(tape, store, s)
}

/// Deformable cross-attention of queries `x` (`[N, C]`) at normalized
/// references `reference` (`[N, 3]`) into `volume`. Residual and norm are
/// left to the caller.
pub fn deformable_cross_attention(
    tape: &mut Tape<Real>,
    store: &ParamStore<Real>,
    p: &CrossAttention,
    cfg: &DecoderConfig,
    x: Var,
    reference: Var,
    volume: Var,
) -> Result<Var> {
    let n = tape.shape(x)[0];
    let (h, k) = (cfg.heads, cfg.points);
    let offsets = p.offsets.forward(tape, store, x)?;
    let logits = p.weights.forward(tape, store, x)?;
    let logits = reshape(tape, logits, &[n, h, k])?;
    let weights = softmax(tape, logits, 2)?;
    let weights = reshape(tape, weights, &[n, h * k])?;
    let sampled = deformable_sample(tape, volume, reference, offsets, weights, DeformLayout { heads: h, points: k })?;
    p.out.forward(tape, store, sampled)
}

pub fn feed_forward(tape: &mut Tape<Real>, store: &ParamStore<Real>, p: &FeedForward, x: Var) -> Result<Var> {
    let hdn = p.hidden.forward(tape, store, x)?;
    let hdn = relu(tape, hdn);
    let y = p.out.forward(tape, store, hdn)?;
    let s = add(tape, x, y)?;
    p.norm.forward(tape, store, s)
}

/// Queries as stored in `store`.
pub fn init_queries(decoder: &Decoder, store: &ParamStore<Real>) -> Result<Vec<ObjectQuery>> {
    let mut tape = Tape::inference();
    let e = tape.param(store, decoder.query_embed);
    let l = decoder.reference_logits(&mut tape, store, e)?;
    let r = sigmoid(&mut tape, l);
    let (ev, rv) = (tape.value(e), tape.value(r));
    Ok((0..ev.rows())
        .map(|i| ObjectQuery {
            embedding: ev.row(i).to_vec(),
            reference: [rv.row(i)[0], rv.row(i)[1], rv.row(i)[2]],
        })
        .collect())
}

/// Regression target encoding of a box: normalized centre, log-size, sin/cos
/// of yaw and velocity.
pub fn encode_box(b: &Box3D, spec: &GridSpec) -> [Real; BOX_PARAMS] {
    let r = spec.ranges();
    let ext = spec.extent();
    let (s, c) = b.yaw.sin_cos();
    [
        (b.center[0] - r[0][0]) / ext[0],
        (b.center[1] - r[1][0]) / ext[1],
        (b.center[2] - r[2][0]) / ext[2],
        b.size[0].ln(),
        b.size[1].ln(),
        b.size[2].ln(),
        s,
        c,
        b.velocity[0],
        b.velocity[1],
    ]
}

/// Inverse of [`encode_box`] plus the class scores of one query.
pub fn decode_box(encoded: &[Real], cls_logits: &[Real], spec: &GridSpec) -> Box3D {
    let r = spec.ranges();
    let ext = spec.extent();
    let (class_id, best) = cls_logits
        .iter()
        .enumerate()
        .fold((0, Real::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
    Box3D {
        center: std::array::from_fn(|a| r[a][0] + encoded[a] * ext[a]),
        size: std::array::from_fn(|a| encoded[3 + a].exp()),
        yaw: normalize_yaw(encoded[6].atan2(encoded[7])),
        velocity: [encoded[8], encoded[9]],
        class_id,
        score: sigmoid_scalar(best),
    }
}

/// Boxes of one block's predictions.
pub fn decode_predictions(encoded: &Tensor<Real>, cls_logits: &Tensor<Real>, spec: &GridSpec) -> Vec<Box3D> {
    (0..encoded.rows())
        .map(|i| decode_box(encoded.row(i), cls_logits.row(i), spec))
        .collect()
}

/// Decoded outputs of a full forward pass on a fixed volume.
#[derive(Clone, Debug)]
pub struct Decoded {
    /// Per block: `(class logits, encoding)`.
    pub blocks: Vec<(Tensor<Real>, Tensor<Real>)>,
    pub detections: Vec<Box3D>,
}

pub fn decode(decoder: &Decoder, store: &ParamStore<Real>, volume: &Tensor<Real>, spec: &GridSpec) -> Result<Decoded> {
    let mut tape = Tape::inference();
    let v = tape.constant(volume.clone());
    let out = decoder.forward(&mut tape, store, v)?;
    let blocks: Vec<_> = out
        .blocks
        .iter()
        .map(|b| (tape.value(b.cls_logits).clone(), tape.value(b.encoded).clone()))
        .collect();
    let (cls, enc) = blocks.last().expect("at least one block");
    let detections = decode_predictions(enc, cls, spec);
    Ok(Decoded { blocks, detections })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (ParamStore<Real>, Decoder) {
        let mut store = ParamStore::new();
        let cfg = DecoderConfig {
            queries: 4,
            blocks: 2,
            heads: 2,
            points: 2,
            channels: 4,
            num_classes: 3,
            ffn_hidden: 6,
            detach_references: false,
        };
        let d = Decoder::new(&mut store, cfg, &mut crate::seeded_rng(5, 0)).unwrap();
        (store, d)
    }

    #[test]
    fn zero_reference_weights_centre_queries() {
        let (mut store, d) = small();
        store.get_mut(d.reference.w).value.fill(0.0);
        for q in init_queries(&d, &store).unwrap() {
            assert_eq!(q.reference, [0.5; 3]);
        }
    }

    #[test]
    fn blocks_emit_one_prediction_each() {
        let (store, d) = small();
        let vol = Tensor::random_normal(&[4, 4, 2, 4], 1.0, &mut crate::seeded_rng(1, 1));
        let spec = GridSpec::new([-4.0, 4.0], [-4.0, 4.0], [-1.0, 1.0], [4, 4, 2], 4).unwrap();
        let out = decode(&d, &store, &vol, &spec).unwrap();
        assert_eq!(out.blocks.len(), 2);
        assert_eq!(out.detections.len(), 4);
    }

    #[test]
    fn decode_identities() {
        let spec = GridSpec::new([-4.0, 4.0], [-4.0, 4.0], [-1.0, 1.0], [4, 4, 2], 4).unwrap();
        let b = decode_box(&[0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0], &[-50.0, -50.0], &spec);
        assert_eq!(b.yaw, 0.0);
        assert_eq!(b.size, [1.0; 3]);
        assert_eq!(b.center, [0.0; 3]);
        assert!(b.score < 1e-15);
    }

    #[test]
    fn encode_decode_round_trip() {
        let spec = GridSpec::new([-4.0, 4.0], [-4.0, 4.0], [-1.0, 1.0], [4, 4, 2], 4).unwrap();
        let b = Box3D::new([1.0, -2.0, 0.25], [2.0, 1.0, 0.5], 2.0, [0.5, -0.1], 1).unwrap();
        let d = decode_box(&encode_box(&b, &spec), &[0.0, 50.0], &spec);
        for a in 0..3 {
            assert!((d.center[a] - b.center[a]).abs() < 1e-12);
            assert!((d.size[a] - b.size[a]).abs() < 1e-12);
        }
        assert!((d.yaw - b.yaw).abs() < 1e-12);
        assert_eq!(d.class_id, 1);
    }
}
