//! Forward pass and exact reverse-mode gradient of the conditional noise
//! predictor.
//!
//! Trunk: `[x_t, temb(t)] -> L_0 -> ... -> L_a -> cross-attention (+residual)
//! -> L_{a+1} -> ... -> head`. The attention block attends from the trunk
//! state over the conditioning tokens; it has no positional encoding, so the
//! output is invariant to token order.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::params::{Gradient, ModelParams};
use super::vocab::TokenSequence;
use crate::error::{check_dim, Error, Result};

/// Sinusoidal timestep features with geometric frequencies in `[1/T, 1]`.
pub fn time_embedding(t: usize, time_dim: usize, total_steps: usize) -> Result<Vec<f64>> {
    if !time_dim.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "time embedding dimension must be even, got {time_dim}"
        )));
    }
    if t > total_steps {
        return Err(Error::Timestep {
            t,
            lo: 0,
            hi: total_steps,
        });
    }
    let half = time_dim / 2;
    let min_freq = 1.0 / total_steps as f64;
    let freqs: Vec<f64> = (0..half)
        .map(|i| {
            if half == 1 {
                1.0
            } else {
                min_freq.powf(i as f64 / (half - 1) as f64)
            }
        })
        .collect();
    let mut out = Vec::with_capacity(time_dim);
    out.extend(freqs.iter().map(|w| (w * t as f64).sin()));
    out.extend(freqs.iter().map(|w| (w * t as f64).cos()));
    Ok(out)
}

/// Per-row conditioning: either one sequence shared by the batch or one per row.
#[derive(Clone, Copy)]
pub enum CondBatch<'a> {
    Shared(&'a TokenSequence),
    PerRow(&'a [&'a TokenSequence]),
}

impl<'a> CondBatch<'a> {
    fn get(&self, row: usize) -> &'a TokenSequence {
        match *self {
            CondBatch::Shared(s) => s,
            CondBatch::PerRow(rows) => rows[row],
        }
    }

    fn check(&self, batch: usize, embed_dim: usize) -> Result<()> {
        match *self {
            CondBatch::Shared(s) => check_dim(embed_dim, s.tokens().ncols()),
            CondBatch::PerRow(rows) => {
                check_dim(batch, rows.len())?;
                rows.iter()
                    .try_for_each(|s| check_dim(embed_dim, s.tokens().ncols()))
            }
        }
    }
}

/// Timesteps: one for the whole batch or one per row.
#[derive(Clone, Copy)]
pub enum TimeBatch<'a> {
    Shared(usize),
    PerRow(&'a [usize]),
}

impl TimeBatch<'_> {
    fn get(&self, row: usize) -> usize {
        match *self {
            TimeBatch::Shared(t) => t,
            TimeBatch::PerRow(ts) => ts[row],
        }
    }
}

struct AttnRow {
    tokens: Array2<f64>,
    keys: Array2<f64>,
    values: Array2<f64>,
    weights: Array1<f64>,
}

/// Intermediate activations kept for the backward pass.
pub struct ForwardCache {
    /// Input to each trunk layer (index 0 is `[x, temb]`).
    layer_inputs: Vec<Array2<f64>>,
    /// Pre-activations of each trunk layer.
    pre: Vec<Array2<f64>>,
    attn_in: Array2<f64>,
    queries: Array2<f64>,
    mixed: Array2<f64>,
    rows: Vec<AttnRow>,
    head_in: Array2<f64>,
}

fn linear(input: &Array2<f64>, w: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut z = input.dot(&w.t());
    z += &b.row(0);
    z
}

fn softmax(scores: &mut Array1<f64>) {
    let max = scores.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    scores.mapv_inplace(|v| (v - max).exp());
    let sum = scores.sum();
    scores.mapv_inplace(|v| v / sum);
}

/// Batched forward pass. Rows of `x` are noisy samples.
pub fn forward(
    params: &ModelParams,
    x: &Array2<f64>,
    ts: TimeBatch<'_>,
    cond: CondBatch<'_>,
    total_steps: usize,
) -> Result<(Array2<f64>, ForwardCache)> {
    let arch = *params.arch();
    let batch = x.nrows();
    check_dim(arch.data_dim, x.ncols())?;
    cond.check(batch, arch.embed_dim)?;
    if let TimeBatch::PerRow(t) = ts {
        check_dim(batch, t.len())?;
    }

    let mut input = Array2::zeros((batch, arch.data_dim + arch.time_dim));
    input.slice_mut(s![.., ..arch.data_dim]).assign(x);
    let mut shared_temb = None;
    if let TimeBatch::Shared(t) = ts {
        shared_temb = Some(Array1::from(time_embedding(t, arch.time_dim, total_steps)?));
    }
    for r in 0..batch {
        let temb = match &shared_temb {
            Some(e) => e.clone(),
            None => Array1::from(time_embedding(ts.get(r), arch.time_dim, total_steps)?),
        };
        input.slice_mut(s![r, arch.data_dim..]).assign(&temb);
    }

    let n_layers = 1 + arch.n_hidden;
    let before = arch.layers_before_attention();
    let mut layer_inputs = Vec::with_capacity(n_layers);
    let mut pre = Vec::with_capacity(n_layers);
    let mut h = input;
    let mut attn = None;
    for l in 0..n_layers {
        let (wn, bn) = layer_names(l);
        let z = linear(&h, params.view(&wn), params.view(&bn));
        let mut a = z.clone();
        a.mapv_inplace(|v| arch.activation.apply(v));
        layer_inputs.push(h);
        pre.push(z);
        h = a;
        if l + 1 == before {
            let (out, cache) = attention_forward(params, &h, cond)?;
            attn = Some((h.clone(), cache));
            h = out;
        }
    }
    let (attn_in, (queries, mixed, rows)) = attn.expect("attention block runs inside the trunk");
    let out = linear(
        &h,
        params.view("trunk.head.weight"),
        params.view("trunk.head.bias"),
    );
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence("non-finite noise estimate".into()));
    }
    Ok((
        out,
        ForwardCache {
            layer_inputs,
            pre,
            attn_in,
            queries,
            mixed,
            rows,
            head_in: h,
        },
    ))
}

fn layer_names(l: usize) -> (String, String) {
    if l == 0 {
        ("trunk.in.weight".into(), "trunk.in.bias".into())
    } else {
        (
            format!("trunk.hidden.{}.weight", l - 1),
            format!("trunk.hidden.{}.bias", l - 1),
        )
    }
}

type AttnCache = (Array2<f64>, Array2<f64>, Vec<AttnRow>);

fn attention_forward(
    params: &ModelParams,
    h: &Array2<f64>,
    cond: CondBatch<'_>,
) -> Result<(Array2<f64>, AttnCache)> {
    let wq = params.view("attn.query.weight");
    let wk = params.view("attn.key.weight");
    let wv = params.view("attn.value.weight");
    let wo = params.view("attn.out.weight");
    let scale = 1.0 / (params.arch().attn_dim() as f64).sqrt();
    let queries = h.dot(&wq.t());
    let mut mixed = Array2::zeros((h.nrows(), wq.nrows()));
    let mut rows = Vec::with_capacity(h.nrows());
    for r in 0..h.nrows() {
        let tokens = cond.get(r).tokens().to_owned();
        let keys = tokens.dot(&wk.t());
        let values = tokens.dot(&wv.t());
        let mut weights = keys.dot(&queries.row(r)) * scale;
        softmax(&mut weights);
        mixed.row_mut(r).assign(&weights.dot(&values));
        rows.push(AttnRow {
            tokens,
            keys,
            values,
            weights,
        });
    }
    let out = h + &mixed.dot(&wo.t());
    Ok((out, (queries, mixed, rows)))
}

/// Exact gradient of `sum(upstream * output)` with respect to every parameter.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    upstream: &Array2<f64>,
) -> Result<Gradient> {
    let arch = *params.arch();
    check_dim(cache.head_in.nrows(), upstream.nrows())?;
    check_dim(arch.data_dim, upstream.ncols())?;
    let mut grad = Gradient::zeros(arch)?;

    // head
    grad.view_mut("trunk.head.weight")
        .assign(&upstream.t().dot(&cache.head_in));
    grad.view_mut("trunk.head.bias")
        .row_mut(0)
        .assign(&upstream.sum_axis(Axis(0)));
    let mut d_h = upstream.dot(&params.view("trunk.head.weight"));

    let n_layers = 1 + arch.n_hidden;
    let before = arch.layers_before_attention();
    for l in (0..n_layers).rev() {
        if l + 1 == before {
            d_h = attention_backward(params, cache, &d_h, &mut grad);
        }
        let z = &cache.pre[l];
        let mut d_z = d_h;
        d_z.zip_mut_with(z, |g, &zv| *g *= arch.activation.derivative(zv));
        let (wn, bn) = layer_names(l);
        grad.view_mut(&wn)
            .assign(&d_z.t().dot(&cache.layer_inputs[l]));
        grad.view_mut(&bn).row_mut(0).assign(&d_z.sum_axis(Axis(0)));
        d_h = d_z.dot(&params.view(&wn));
    }
    if !grad.is_finite() {
        return Err(Error::Divergence("non-finite gradient".into()));
    }
    Ok(grad)
}

fn attention_backward(
    params: &ModelParams,
    cache: &ForwardCache,
    d_out: &Array2<f64>,
    grad: &mut Gradient,
) -> Array2<f64> {
    let wq = params.view("attn.query.weight");
    let wo = params.view("attn.out.weight");
    let scale = 1.0 / (params.arch().attn_dim() as f64).sqrt();

    grad.view_mut("attn.out.weight")
        .assign(&d_out.t().dot(&cache.mixed));
    let d_mixed = d_out.dot(&wo);

    let (a, e) = (wq.nrows(), params.arch().embed_dim);
    let mut d_wk = Array2::<f64>::zeros((a, e));
    let mut d_wv = Array2::<f64>::zeros((a, e));
    let mut d_q = Array2::<f64>::zeros(cache.queries.raw_dim());
    for (r, row) in cache.rows.iter().enumerate() {
        let du = d_mixed.row(r);
        // d weights and d values
        let d_w = row.values.dot(&du);
        let d_values = row
            .weights
            .view()
            .insert_axis(Axis(1))
            .dot(&du.insert_axis(Axis(0)));
        let avg = row.weights.dot(&d_w);
        let d_scores = &row.weights * &(d_w - avg);
        let d_scores_scaled = d_scores * scale;
        d_q.row_mut(r).assign(&d_scores_scaled.dot(&row.keys));
        let d_keys = d_scores_scaled
            .insert_axis(Axis(1))
            .dot(&cache.queries.row(r).insert_axis(Axis(0)));
        d_wk += &d_keys.t().dot(&row.tokens);
        d_wv += &d_values.t().dot(&row.tokens);
    }
    grad.view_mut("attn.key.weight").assign(&d_wk);
    grad.view_mut("attn.value.weight").assign(&d_wv);
    grad.view_mut("attn.query.weight")
        .assign(&d_q.t().dot(&cache.attn_in));
    d_out + &d_q.dot(&wq)
}
