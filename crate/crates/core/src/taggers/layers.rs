use super::{SeqBatch, TaggerError};
use crate::numgrad::{xavier_uniform, ParamStore, Rng, Tape, Tensor, Var};

/// Looks up a parameter by name and records it on the tape.
pub(crate) fn param<'p>(tape: &mut Tape<'p>, store: &'p ParamStore, name: &str) -> Result<Var, TaggerError> {
    let id = store.id(name).ok_or_else(|| TaggerError::MissingParam(name.to_string()))?;
    Ok(tape.param(store, id))
}

/// `PE(pos, 2i) = sin(pos / 10000^(2i/d))`, `PE(pos, 2i+1) = cos(…)`.
pub fn sinusoidal_pe(maxlen: usize, d: usize) -> Result<Tensor, TaggerError> {
    if !d.is_multiple_of(2) {
        return Err(TaggerError::Config(format!(
            "positional encoding needs an even width, got {d}"
        )));
    }
    let mut t = Tensor::zeros(&[maxlen, d]);
    for pos in 0..maxlen {
        let row = t.row_mut(pos);
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            row[2 * i] = angle.sin();
            row[2 * i + 1] = angle.cos();
        }
    }
    Ok(t)
}

pub(crate) fn init_linear(store: &mut ParamStore, rng: &mut Rng, prefix: &str, fan_in: usize, fan_out: usize) {
    store.insert(
        format!("{prefix}.w"),
        xavier_uniform(rng, &[fan_in, fan_out], fan_in, fan_out),
    );
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}

pub(crate) fn linear<'p>(tape: &mut Tape<'p>, store: &'p ParamStore, prefix: &str, x: Var) -> Result<Var, TaggerError> {
    let w = param(tape, store, &format!("{prefix}.w"))?;
    let b = param(tape, store, &format!("{prefix}.b"))?;
    Ok(tape.linear(x, w, b)?)
}

/// Embedding tables treat their one-hot input as fan-in 1.
pub(crate) fn init_embedding(rng: &mut Rng, rows: usize, dim: usize) -> Tensor {
    xavier_uniform(rng, &[rows, dim], 1, dim)
}

fn init_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.g"), Tensor::full(&[d], 1.0));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[d]));
}

const LN_EPS: f64 = 1e-5;

fn layer_norm<'p>(tape: &mut Tape<'p>, store: &'p ParamStore, prefix: &str, x: Var) -> Result<Var, TaggerError> {
    let g = param(tape, store, &format!("{prefix}.g"))?;
    let b = param(tape, store, &format!("{prefix}.b"))?;
    Ok(tape.layer_norm(x, g, b, LN_EPS)?)
}

pub(crate) fn init_attention(store: &mut ParamStore, rng: &mut Rng, prefix: &str, d: usize) {
    for proj in ["q", "k", "v", "o"] {
        init_linear(store, rng, &format!("{prefix}.{proj}"), d, d);
    }
}

/// Output of [`multi_head_attention`]: the projected result and the
/// attention matrices, one `[width × width]` value per (row, head).
pub struct Attention {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// Multi-head self-attention over `x = [rows·width × d]`. Keys at pad
/// positions of each row get zero weight.
pub fn multi_head_attention<'p>(
    tape: &mut Tape<'p>,
    store: &'p ParamStore,
    prefix: &str,
    x: Var,
    batch: &SeqBatch,
    num_heads: usize,
) -> Result<Attention, TaggerError> {
    let d = tape.shape(x)[1];
    if num_heads == 0 || !d.is_multiple_of(num_heads) {
        return Err(TaggerError::Config(format!("width {d} not divisible by {num_heads} heads")));
    }
    let dk = d / num_heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let q = linear(tape, store, &format!("{prefix}.q"), x)?;
    let k = linear(tape, store, &format!("{prefix}.k"), x)?;
    let v = linear(tape, store, &format!("{prefix}.v"), x)?;
    let w = batch.width;
    let mut rows = Vec::with_capacity(batch.rows());
    let mut weights = Vec::with_capacity(batch.rows() * num_heads);
    for r in 0..batch.rows() {
        let keep = batch.keep_row(r);
        let (qr, kr, vr) = (
            tape.slice_rows(q, r * w, (r + 1) * w)?,
            tape.slice_rows(k, r * w, (r + 1) * w)?,
            tape.slice_rows(v, r * w, (r + 1) * w)?,
        );
        let mut heads = Vec::with_capacity(num_heads);
        for h in 0..num_heads {
            let (qh, kh, vh) = if num_heads == 1 {
                (qr, kr, vr)
            } else {
                (
                    tape.slice_cols(qr, h * dk, (h + 1) * dk)?,
                    tape.slice_cols(kr, h * dk, (h + 1) * dk)?,
                    tape.slice_cols(vr, h * dk, (h + 1) * dk)?,
                )
            };
            let scores = tape.matmul_t(qh, kh, false, true)?;
            let scores = tape.scale(scores, scale);
            let a = tape.softmax_masked(scores, Some(&keep));
            weights.push(a);
            heads.push(tape.matmul(a, vh)?);
        }
        rows.push(if num_heads == 1 { heads[0] } else { tape.concat_cols(&heads)? });
    }
    let joined = if rows.len() == 1 { rows[0] } else { tape.concat_rows(&rows)? };
    let output = linear(tape, store, &format!("{prefix}.o"), joined)?;
    Ok(Attention { output, weights })
}

pub fn init_encoder_layer(store: &mut ParamStore, rng: &mut Rng, prefix: &str, d: usize, ffn: usize) {
    init_attention(store, rng, &format!("{prefix}.attn"), d);
    init_layer_norm(store, &format!("{prefix}.ln1"), d);
    init_linear(store, rng, &format!("{prefix}.ffn1"), d, ffn);
    init_linear(store, rng, &format!("{prefix}.ffn2"), ffn, d);
    init_layer_norm(store, &format!("{prefix}.ln2"), d);
}

fn maybe_dropout(tape: &mut Tape<'_>, x: Var, p: f64, rng: Option<&mut Rng>) -> Result<Var, TaggerError> {
    match rng {
        Some(rng) if p > 0.0 => Ok(tape.dropout(x, p, rng)?),
        _ => Ok(x),
    }
}

/// Post-LN encoder block: `LN(x + MHA(x))` then `LN(h + FFN(h))`.
#[allow(clippy::too_many_arguments)]
pub fn encoder_layer<'p>(
    tape: &mut Tape<'p>,
    store: &'p ParamStore,
    prefix: &str,
    x: Var,
    batch: &SeqBatch,
    num_heads: usize,
    dropout: f64,
    mut rng: Option<&mut Rng>,
) -> Result<Var, TaggerError> {
    let att = multi_head_attention(tape, store, &format!("{prefix}.attn"), x, batch, num_heads)?;
    let a = maybe_dropout(tape, att.output, dropout, rng.as_deref_mut())?;
    let h = tape.add(x, a)?;
    let h = layer_norm(tape, store, &format!("{prefix}.ln1"), h)?;
    let f = linear(tape, store, &format!("{prefix}.ffn1"), h)?;
    let f = tape.relu(f);
    let f = linear(tape, store, &format!("{prefix}.ffn2"), f)?;
    let f = maybe_dropout(tape, f, dropout, rng)?;
    let out = tape.add(h, f)?;
    layer_norm(tape, store, &format!("{prefix}.ln2"), out)
}

pub(crate) fn dropout_opt(tape: &mut Tape<'_>, x: Var, p: f64, rng: Option<&mut Rng>) -> Result<Var, TaggerError> {
    maybe_dropout(tape, x, p, rng)
}

/// `[rows·width × d]` copy of the first `width` rows of `table`, repeated
/// per row.
pub(crate) fn tile_rows(table: &Tensor, rows: usize, width: usize) -> Tensor {
    let d = table.cols();
    let mut data = Vec::with_capacity(rows * width * d);
    for _ in 0..rows {
        data.extend_from_slice(&table.data()[..width * d]);
    }
    Tensor::new(vec![rows * width, d], data).expect("tiled shape")
}
