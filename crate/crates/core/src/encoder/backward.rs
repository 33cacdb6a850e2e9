//! Reverse-mode pass over a [`Trace`].

use super::forward::{NormCache, Trace};
use super::params::ModelParams;
use crate::dataset::PAD;
use crate::numerics::{axpy, dot, layer_norm_backward, vec_mat_backward, Matrix};

fn norm_backward(dy: &Matrix, cache: &NormCache, gain: &[f64], dgain: &mut [f64], dbias: &mut [f64], dx: &mut Matrix) {
    for r in 0..dy.rows() {
        layer_norm_backward(dy.row(r), cache.xhat.row(r), cache.rstd[r], gain, dx.row_mut(r), dgain, dbias);
    }
}

/// `dx += dy · wᵀ`, `dw += xᵀ · dy`, `dbias += Σ dy`.
fn project_backward(x: &Matrix, w: &Matrix, dy: &Matrix, dx: &mut Matrix, dw: &mut Matrix, dbias: Option<&mut [f64]>) {
    for r in 0..x.rows() {
        vec_mat_backward(x.row(r), w, dy.row(r), dx.row_mut(r), dw);
    }
    if let Some(db) = dbias {
        for r in 0..dy.rows() {
            axpy(1.0, dy.row(r), db);
        }
    }
}

fn mask_in_place(x: &mut Matrix, mask: &Option<Vec<f64>>) {
    if let Some(mask) = mask {
        for (v, m) in x.as_mut_slice().iter_mut().zip(mask) {
            *v *= m;
        }
    }
}

impl Trace {
    /// Accumulates parameter gradients into `grads` given the gradient of the
    /// loss with respect to the traced hidden rows.
    pub(crate) fn backward(&self, params: &ModelParams, d_hidden: &Matrix, grads: &mut ModelParams) {
        let cfg = *params.config();
        let (m, d) = (d_hidden.rows(), cfg.hidden);
        let heads = cfg.heads;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let mut dx = match &self.final_in {
            Some(cache) => {
                let mut dz = Matrix::zeros(m, d);
                norm_backward(d_hidden, cache, &params.final_norm_gain, &mut grads.final_norm_gain, &mut grads.final_norm_bias, &mut dz);
                dz
            }
            None => d_hidden.clone(),
        };

        for (l, tr) in self.layers.iter().enumerate().rev() {
            let layer = &params.layers[l];
            let g = &mut grads.layers[l];

            // z = y + drop(FFN(LN2(y)))
            let mut df = dx.clone();
            mask_in_place(&mut df, &tr.drop2);
            let mut dact = Matrix::zeros(m, cfg.ffn);
            project_backward(&tr.act, &layer.ffn_out, &df, &mut dact, &mut g.ffn_out, Some(&mut g.ffn_out_bias));
            for (da, pre) in dact.as_mut_slice().iter_mut().zip(tr.pre_act.as_slice()) {
                if *pre <= 0.0 {
                    *da = 0.0;
                }
            }
            let mut dnorm2 = Matrix::zeros(m, d);
            project_backward(&tr.norm2.out, &layer.ffn_in, &dact, &mut dnorm2, &mut g.ffn_in, Some(&mut g.ffn_in_bias));
            let mut dy = dx;
            norm_backward(&dnorm2, &tr.norm2, &layer.ffn_norm_gain, &mut g.ffn_norm_gain, &mut g.ffn_norm_bias, &mut dy);

            // y = x + drop(MHA(LN1(x)))
            let mut dattn = dy.clone();
            mask_in_place(&mut dattn, &tr.drop1);
            let mut dctx = Matrix::zeros(m, d);
            project_backward(&tr.ctx, &layer.output, &dattn, &mut dctx, &mut g.output, None);

            let mut dq = Matrix::zeros(m, d);
            let mut dk = Matrix::zeros(m, d);
            let mut dv = Matrix::zeros(m, d);
            let mut dp = vec![0.0; m];
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..m {
                    let p = &tr.probs[(h * m + i) * m..(h * m + i + 1) * m];
                    let dci = &dctx.row(i)[cols.clone()];
                    let mut weighted = 0.0;
                    for j in 0..m {
                        if p[j] != 0.0 {
                            dp[j] = dot(dci, &tr.v.row(j)[cols.clone()]);
                            weighted += p[j] * dp[j];
                            axpy(p[j], dci, &mut dv.row_mut(j)[cols.clone()]);
                        }
                    }
                    for j in 0..m {
                        if p[j] != 0.0 {
                            let ds = p[j] * (dp[j] - weighted) * scale;
                            axpy(ds, &tr.k.row(j)[cols.clone()], &mut dq.row_mut(i)[cols.clone()]);
                            axpy(ds, &tr.q.row(i)[cols.clone()], &mut dk.row_mut(j)[cols.clone()]);
                        }
                    }
                }
            }

            let mut dnorm1 = Matrix::zeros(m, d);
            project_backward(&tr.norm1.out, &layer.query, &dq, &mut dnorm1, &mut g.query, None);
            project_backward(&tr.norm1.out, &layer.key, &dk, &mut dnorm1, &mut g.key, None);
            project_backward(&tr.norm1.out, &layer.value, &dv, &mut dnorm1, &mut g.value, None);
            let mut dx_prev = dy;
            norm_backward(&dnorm1, &tr.norm1, &layer.attn_norm_gain, &mut g.attn_norm_gain, &mut g.attn_norm_bias, &mut dx_prev);
            dx = dx_prev;
        }

        for i in 0..m {
            let t = self.first_row + i;
            let id = self.window[t];
            axpy(1.0, dx.row(i), grads.position_embeddings.row_mut(t));
            if id != PAD {
                axpy(1.0, dx.row(i), grads.item_embeddings.row_mut(id as usize));
            }
        }
    }
}
