//! Pre-norm transformer blocks with bidirectional multi-head attention.

use rand::Rng;

use super::EncoderConfig;
use crate::autograd::{Tape, Var};
use crate::params::{gaussian, Binder, ParamRole, ParamStore};
use crate::tensor::Matrix;

fn name(tower: &str, layer: usize, part: &str) -> String {
    format!("{tower}.layers.{layer}.{part}")
}

pub(crate) fn init_block<R: Rng>(
    store: &mut ParamStore,
    tower: &str,
    layer: usize,
    cfg: &EncoderConfig,
    rng: &mut R,
) {
    let c = cfg.embed_dim;
    let h = cfg.mlp_hidden();
    let in_std = 1.0 / (c as f64).sqrt();
    // residual-branch outputs are damped by depth so the stream stays bounded
    let depth = (2.0 * cfg.num_layers as f64).sqrt();
    let frozen = ParamRole::Frozen;
    let mut put = |part: &str, m: Matrix| store.insert(name(tower, layer, part), m, frozen);
    put("ln1.g", Matrix::filled(1, c, 1.0));
    put("ln1.b", Matrix::zeros(1, c));
    put("attn.qkv.w", gaussian(c, 3 * c, in_std, rng));
    put("attn.qkv.b", Matrix::zeros(1, 3 * c));
    put("attn.out.w", gaussian(c, c, in_std / depth, rng));
    put("attn.out.b", Matrix::zeros(1, c));
    put("ln2.g", Matrix::filled(1, c, 1.0));
    put("ln2.b", Matrix::zeros(1, c));
    put("mlp.fc1.w", gaussian(c, h, in_std, rng));
    put("mlp.fc1.b", Matrix::zeros(1, h));
    put(
        "mlp.fc2.w",
        gaussian(h, c, 1.0 / (h as f64).sqrt() / depth, rng),
    );
    put("mlp.fc2.b", Matrix::zeros(1, c));
}

/// One transformer block applied to a `(tokens, C)` sequence.
pub(crate) fn block(
    tape: &mut Tape,
    bind: &mut Binder,
    tower: &str,
    layer: usize,
    cfg: &EncoderConfig,
    x: Var,
) -> Var {
    let mut p = |tape: &mut Tape, part: &str| bind.var(tape, &name(tower, layer, part));
    let c = cfg.embed_dim;
    let hd = cfg.head_dim();

    let g1 = p(tape, "ln1.g");
    let b1 = p(tape, "ln1.b");
    let h = tape.layer_norm(x, g1, b1);
    let wqkv = p(tape, "attn.qkv.w");
    let bqkv = p(tape, "attn.qkv.b");
    let qkv = tape.linear(h, wqkv, bqkv);
    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for head in 0..cfg.num_heads {
        let q = tape.slice_cols(qkv, head * hd, hd);
        let k = tape.slice_cols(qkv, c + head * hd, hd);
        let v = tape.slice_cols(qkv, 2 * c + head * hd, hd);
        let scores = tape.matmul_t(q, k);
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax(scores);
        heads.push(tape.matmul(attn, v));
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)
    };
    let wo = p(tape, "attn.out.w");
    let bo = p(tape, "attn.out.b");
    let attn_out = tape.linear(merged, wo, bo);
    let x = tape.add(x, attn_out);

    let g2 = p(tape, "ln2.g");
    let b2 = p(tape, "ln2.b");
    let h = tape.layer_norm(x, g2, b2);
    let w1 = p(tape, "mlp.fc1.w");
    let bb1 = p(tape, "mlp.fc1.b");
    let h = tape.linear(h, w1, bb1);
    let h = tape.gelu(h);
    let w2 = p(tape, "mlp.fc2.w");
    let bb2 = p(tape, "mlp.fc2.b");
    let mlp_out = tape.linear(h, w2, bb2);
    tape.add(x, mlp_out)
}
