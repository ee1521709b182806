use ndarray::{ArrayD, IxDyn, Zip};

use super::{Graph, Tensor, Var};

fn scalar(v: f64) -> Tensor {
    ArrayD::from_elem(IxDyn(&[]), v)
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected a 4-D tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn grad_scalar(g: &Tensor) -> f64 {
    g.iter().next().copied().unwrap_or(0.0)
}

/// Clamp used by probability-domain cross-entropy.
pub const PROB_EPS: f64 = 1e-12;

impl Graph {
    fn assert_same_shape(&self, a: Var, b: Var, op: &str) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "{op}: shape mismatch {sa:?} vs {sb:?}");
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "add");
        let out = &*self.value(a) + &*self.value(b);
        self.push(out, &[a, b], || Box::new(|g: &Tensor| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "sub");
        let out = &*self.value(a) - &*self.value(b);
        self.push(out, &[a, b], || Box::new(|g: &Tensor| vec![Some(g.clone()), Some(-g)]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "mul");
        let (av, bv) = (self.value(a), self.value(b));
        let out = &*av * &*bv;
        self.push(out, &[a, b], move || {
            Box::new(move |g: &Tensor| vec![Some(g * &*bv), Some(g * &*av)])
        })
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.assert_same_shape(a, b, "div");
        let (av, bv) = (self.value(a), self.value(b));
        let out = &*av / &*bv;
        self.push(out, &[a, b], move || {
            Box::new(move |g: &Tensor| {
                let da = g / &*bv;
                let db = -(g * &*av) / (&*bv * &*bv);
                vec![Some(da), Some(db)]
            })
        })
    }

    pub fn scale(&self, a: Var, factor: f64) -> Var {
        let out = &*self.value(a) * factor;
        self.push(out, &[a], move || Box::new(move |g: &Tensor| vec![Some(g * factor)]))
    }

    pub fn add_scalar(&self, a: Var, offset: f64) -> Var {
        let out = &*self.value(a) + offset;
        self.push(out, &[a], || Box::new(|g: &Tensor| vec![Some(g.clone())]))
    }

    pub fn square(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.mapv(|x| x * x);
        self.push(out, &[a], move || Box::new(move |g: &Tensor| vec![Some(g * &*av * 2.0)]))
    }

    pub fn sum(&self, a: Var) -> Var {
        let av = self.value(a);
        let dim = av.raw_dim();
        let out = scalar(av.sum());
        self.push(out, &[a], move || {
            Box::new(move |g: &Tensor| vec![Some(ArrayD::from_elem(dim.clone(), grad_scalar(g)))])
        })
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn relu(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.mapv(|x| x.max(0.0));
        self.push(out, &[a], move || {
            Box::new(move |g: &Tensor| {
                let mut d = g.clone();
                Zip::from(&mut d).and(&*av).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                });
                vec![Some(d)]
            })
        })
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        let y = out.clone();
        self.push(out, &[a], move || {
            Box::new(move |g: &Tensor| {
                let mut d = g.clone();
                Zip::from(&mut d).and(&y).for_each(|d, &s| *d *= s * (1.0 - s));
                vec![Some(d)]
            })
        })
    }

    /// Channelwise soft shrinkage `sign(z) * max(|z| - lambda_c, 0)` on
    /// `z: [n, c, h, w]` with `lambda: [c]`.
    pub fn soft_threshold(&self, z: Var, lambda: Var) -> Var {
        let zv = self.value(z);
        let lv = self.value(lambda);
        let (n, c, h, w) = dims4(&zv);
        assert_eq!(lv.len(), c, "soft_threshold: {} thresholds for {c} channels", lv.len());
        let hw = h * w;
        let lam: Vec<f64> = lv.iter().copied().collect();
        let zs = zv.as_slice().unwrap();
        let mut out = vec![0.0; zs.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    out[i] = shrink(zs[i], lam[ch]);
                }
            }
        }
        let out = Tensor::from_shape_vec(IxDyn(&[n, c, h, w]), out).unwrap();
        self.push(out, &[z, lambda], move || {
            Box::new(move |g: &Tensor| {
                let zs = zv.as_slice().unwrap();
                let gs = g.as_slice().unwrap();
                let mut dz = vec![0.0; zs.len()];
                let mut dl = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            if zs[i].abs() > lam[ch] {
                                dz[i] = gs[i];
                                dl[ch] -= zs[i].signum() * gs[i];
                            }
                        }
                    }
                }
                vec![
                    Some(Tensor::from_shape_vec(IxDyn(&[n, c, h, w]), dz).unwrap()),
                    Some(Tensor::from_shape_vec(IxDyn(&[c]), dl).unwrap()),
                ]
            })
        })
    }

    /// 2x2 max pooling with stride 2; height and width must be even.
    pub fn max_pool2(&self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = dims4(&xv);
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial size, got {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let xs = xv.as_slice().unwrap();
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for p in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let i = p * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                            if xs[i] > best {
                                best = xs[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = p * oh * ow + oy * ow + ox;
                    out[o] = best;
                    argmax[o] = best_i;
                }
            }
        }
        let out = Tensor::from_shape_vec(IxDyn(&[n, c, oh, ow]), out).unwrap();
        let len = xs.len();
        self.push(out, &[x], move || {
            Box::new(move |g: &Tensor| {
                let mut dx = vec![0.0; len];
                for (o, gv) in g.iter().enumerate() {
                    dx[argmax[o]] += gv;
                }
                vec![Some(Tensor::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap())]
            })
        })
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = dims4(&xv);
        let (oh, ow) = (2 * h, 2 * w);
        let xs = xv.as_slice().unwrap();
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[p * oh * ow + y * ow + xx] = xs[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::from_shape_vec(IxDyn(&[n, c, oh, ow]), out).unwrap();
        self.push(out, &[x], move || {
            Box::new(move |g: &Tensor| {
                let gs = g.as_slice().unwrap();
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            dx[p * h * w + (y / 2) * w + xx / 2] += gs[p * oh * ow + y * ow + xx];
                        }
                    }
                }
                vec![Some(Tensor::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap())]
            })
        })
    }

    /// Concatenates `[n, c_i, h, w]` tensors along the channel axis.
    pub fn concat_channels(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_channels of nothing");
        let values: Vec<_> = parts.iter().map(|v| self.value(*v)).collect();
        let (n, _, h, w) = dims4(&values[0]);
        let chans: Vec<usize> = values
            .iter()
            .map(|v| {
                let (vn, vc, vh, vw) = dims4(v);
                assert!(vn == n && vh == h && vw == w, "concat_channels: incompatible shapes");
                vc
            })
            .collect();
        let total: usize = chans.iter().sum();
        let hw = h * w;
        let mut out = vec![0.0; n * total * hw];
        for b in 0..n {
            let mut offset = 0;
            for (v, &c) in values.iter().zip(&chans) {
                let src = &v.as_slice().unwrap()[b * c * hw..(b + 1) * c * hw];
                out[(b * total + offset) * hw..(b * total + offset + c) * hw].copy_from_slice(src);
                offset += c;
            }
        }
        let out = Tensor::from_shape_vec(IxDyn(&[n, total, h, w]), out).unwrap();
        self.push(out, parts, move || {
            Box::new(move |g: &Tensor| {
                let gs = g.as_slice().unwrap();
                let mut offset = 0;
                chans
                    .iter()
                    .map(|&c| {
                        let mut d = vec![0.0; n * c * hw];
                        for b in 0..n {
                            d[b * c * hw..(b + 1) * c * hw]
                                .copy_from_slice(&gs[(b * total + offset) * hw..(b * total + offset + c) * hw]);
                        }
                        offset += c;
                        Some(Tensor::from_shape_vec(IxDyn(&[n, c, h, w]), d).unwrap())
                    })
                    .collect()
            })
        })
    }

    /// Gathers rows of the leading (batch) axis.
    /// Stacks tensors with equal trailing shapes along the batch axis.
    pub fn concat_batch(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_batch of nothing");
        let values: Vec<_> = parts.iter().map(|v| self.value(*v)).collect();
        let tail = values[0].shape()[1..].to_vec();
        assert!(values.iter().all(|v| v.shape()[1..] == tail[..]), "concat_batch: incompatible shapes");
        let rows: Vec<usize> = values.iter().map(|v| v.shape()[0]).collect();
        let row: usize = tail.iter().product();
        let mut out = Vec::with_capacity(rows.iter().sum::<usize>() * row);
        for v in &values {
            out.extend_from_slice(v.as_slice().unwrap());
        }
        let mut shape = vec![rows.iter().sum()];
        shape.extend_from_slice(&tail);
        let out = Tensor::from_shape_vec(IxDyn(&shape), out).unwrap();
        self.push(out, parts, move || {
            Box::new(move |g: &Tensor| {
                let gs = g.as_slice().unwrap();
                let mut offset = 0;
                rows.iter()
                    .map(|&n| {
                        let mut s = vec![n];
                        s.extend_from_slice(&tail);
                        let d = gs[offset * row..(offset + n) * row].to_vec();
                        offset += n;
                        Some(Tensor::from_shape_vec(IxDyn(&s), d).unwrap())
                    })
                    .collect()
            })
        })
    }

    pub fn select_batch(&self, x: Var, indices: &[usize]) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let row: usize = shape[1..].iter().product();
        let xs = xv.as_slice().unwrap();
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            assert!(i < shape[0], "select_batch index {i} out of range {}", shape[0]);
            out.extend_from_slice(&xs[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = indices.len();
        let out = Tensor::from_shape_vec(IxDyn(&out_shape), out).unwrap();
        let indices = indices.to_vec();
        self.push(out, &[x], move || {
            Box::new(move |g: &Tensor| {
                let gs = g.as_slice().unwrap();
                let mut dx = vec![0.0; shape.iter().product()];
                for (k, &i) in indices.iter().enumerate() {
                    for (d, s) in dx[i * row..(i + 1) * row].iter_mut().zip(&gs[k * row..(k + 1) * row]) {
                        *d += s;
                    }
                }
                vec![Some(Tensor::from_shape_vec(IxDyn(&shape), dx).unwrap())]
            })
        })
    }

    /// Multiplies `x: [n, c, h, w]` by a single-channel `gate: [n, 1, h, w]`
    /// broadcast over channels.
    pub fn gate(&self, x: Var, gate: Var) -> Var {
        let xv = self.value(x);
        let gv = self.value(gate);
        let (n, c, h, w) = dims4(&xv);
        let (gn, gc, gh, gw) = dims4(&gv);
        assert!(gn == n && gc == 1 && gh == h && gw == w, "gate shape mismatch");
        let hw = h * w;
        let xs = xv.as_slice().unwrap();
        let gs = gv.as_slice().unwrap();
        let mut out = vec![0.0; xs.len()];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    out[(b * c + ch) * hw + p] = xs[(b * c + ch) * hw + p] * gs[b * hw + p];
                }
            }
        }
        let out = Tensor::from_shape_vec(IxDyn(&[n, c, h, w]), out).unwrap();
        self.push(out, &[x, gate], move || {
            Box::new(move |g: &Tensor| {
                let xs = xv.as_slice().unwrap();
                let gts = gv.as_slice().unwrap();
                let go = g.as_slice().unwrap();
                let mut dx = vec![0.0; xs.len()];
                let mut dg = vec![0.0; n * hw];
                for b in 0..n {
                    for ch in 0..c {
                        for p in 0..hw {
                            let i = (b * c + ch) * hw + p;
                            dx[i] = go[i] * gts[b * hw + p];
                            dg[b * hw + p] += go[i] * xs[i];
                        }
                    }
                }
                vec![
                    Some(Tensor::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap()),
                    Some(Tensor::from_shape_vec(IxDyn(&[n, 1, h, w]), dg).unwrap()),
                ]
            })
        })
    }

    /// Per-pixel channel max and channel mean, stacked as `[n, 2, h, w]`.
    pub fn channel_max_mean(&self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = dims4(&xv);
        let hw = h * w;
        let xs = xv.as_slice().unwrap();
        let mut out = vec![0.0; n * 2 * hw];
        let mut argmax = vec![0usize; n * hw];
        for b in 0..n {
            for p in 0..hw {
                let mut best = f64::NEG_INFINITY;
                let mut best_c = 0;
                let mut sum = 0.0;
                for ch in 0..c {
                    let v = xs[(b * c + ch) * hw + p];
                    sum += v;
                    if v > best {
                        best = v;
                        best_c = ch;
                    }
                }
                out[b * 2 * hw + p] = best;
                out[b * 2 * hw + hw + p] = sum / c as f64;
                argmax[b * hw + p] = best_c;
            }
        }
        let out = Tensor::from_shape_vec(IxDyn(&[n, 2, h, w]), out).unwrap();
        self.push(out, &[x], move || {
            Box::new(move |g: &Tensor| {
                let gs = g.as_slice().unwrap();
                let mut dx = vec![0.0; n * c * hw];
                for b in 0..n {
                    for p in 0..hw {
                        let gmax = gs[b * 2 * hw + p];
                        let gmean = gs[b * 2 * hw + hw + p] / c as f64;
                        for ch in 0..c {
                            dx[(b * c + ch) * hw + p] += gmean;
                        }
                        dx[(b * c + argmax[b * hw + p]) * hw + p] += gmax;
                    }
                }
                vec![Some(Tensor::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap())]
            })
        })
    }

    /// Training-mode batch normalisation over `(n, h, w)` per channel.
    ///
    /// Returns the normalised output together with the batch mean and the
    /// unbiased batch variance (for running-statistic bookkeeping).
    pub fn batch_norm_train(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, Vec<f64>, Vec<f64>) {
        let xv = self.value(x);
        let (n, c, h, w) = dims4(&xv);
        let hw = h * w;
        let m = (n * hw) as f64;
        let xs = xv.as_slice().unwrap();
        let gam: Vec<f64> = self.value(gamma).iter().copied().collect();
        let bet: Vec<f64> = self.value(beta).iter().copied().collect();
        assert!(gam.len() == c && bet.len() == c, "batch_norm: affine size mismatch");

        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                s += xs[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
            }
            mean[ch] = s / m;
            let mut ss = 0.0;
            for b in 0..n {
                for v in &xs[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                    ss += (v - mean[ch]).powi(2);
                }
            }
            var[ch] = ss / m;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    let i = (b * c + ch) * hw + p;
                    xhat[i] = (xs[i] - mean[ch]) * inv_std[ch];
                    out[i] = gam[ch] * xhat[i] + bet[ch];
                }
            }
        }
        let unbiased: Vec<f64> = if m > 1.0 { var.iter().map(|v| v * m / (m - 1.0)).collect() } else { var.clone() };
        let out = Tensor::from_shape_vec(IxDyn(&[n, c, h, w]), out).unwrap();
        let y = self.push(out, &[x, gamma, beta], move || {
            Box::new(move |g: &Tensor| {
                let gs = g.as_slice().unwrap();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        for p in 0..hw {
                            let i = (b * c + ch) * hw + p;
                            dbeta[ch] += gs[i];
                            dgamma[ch] += gs[i] * xhat[i];
                        }
                    }
                }
                let mut dx = vec![0.0; gs.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let k = gam[ch] * inv_std[ch] / m;
                        for p in 0..hw {
                            let i = (b * c + ch) * hw + p;
                            dx[i] = k * (m * gs[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                        }
                    }
                }
                vec![
                    Some(Tensor::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap()),
                    Some(Tensor::from_shape_vec(IxDyn(&[c]), dgamma).unwrap()),
                    Some(Tensor::from_shape_vec(IxDyn(&[c]), dbeta).unwrap()),
                ]
            })
        });
        (y, mean, unbiased)
    }

    /// Inference-mode batch normalisation with fixed statistics.
    pub fn batch_norm_eval(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = dims4(&xv);
        let hw = h * w;
        let gam: Vec<f64> = self.value(gamma).iter().copied().collect();
        let bet: Vec<f64> = self.value(beta).iter().copied().collect();
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mean = running_mean.to_vec();
        let xs = xv.as_slice().unwrap();
        let mut out = vec![0.0; xs.len()];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    let i = (b * c + ch) * hw + p;
                    out[i] = gam[ch] * (xs[i] - mean[ch]) * inv_std[ch] + bet[ch];
                }
            }
        }
        let out = Tensor::from_shape_vec(IxDyn(&[n, c, h, w]), out).unwrap();
        self.push(out, &[x, gamma, beta], move || {
            Box::new(move |g: &Tensor| {
                let xs = xv.as_slice().unwrap();
                let gs = g.as_slice().unwrap();
                let mut dx = vec![0.0; gs.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        for p in 0..hw {
                            let i = (b * c + ch) * hw + p;
                            let xhat = (xs[i] - mean[ch]) * inv_std[ch];
                            dx[i] = gs[i] * gam[ch] * inv_std[ch];
                            dgamma[ch] += gs[i] * xhat;
                            dbeta[ch] += gs[i];
                        }
                    }
                }
                vec![
                    Some(Tensor::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap()),
                    Some(Tensor::from_shape_vec(IxDyn(&[c]), dgamma).unwrap()),
                    Some(Tensor::from_shape_vec(IxDyn(&[c]), dbeta).unwrap()),
                ]
            })
        })
    }

    /// Mean binary cross-entropy computed from logits (numerically stable).
    pub fn bce_with_logits(&self, logits: Var, target: &Tensor) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape(), target.shape(), "bce_with_logits: shape mismatch");
        let count = lv.len() as f64;
        let total: f64 = lv
            .iter()
            .zip(target.iter())
            .map(|(&l, &y)| l.max(0.0) - l * y + (-l.abs()).exp().ln_1p())
            .sum();
        let target = target.clone();
        self.push(scalar(total / count), &[logits], move || {
            Box::new(move |g: &Tensor| {
                let gs = grad_scalar(g) / count;
                let mut d = lv.mapv(sigmoid);
                Zip::from(&mut d).and(&target).for_each(|d, &y| *d = (*d - y) * gs);
                vec![Some(d)]
            })
        })
    }

    /// Mean binary cross-entropy of probabilities, clamped to
    /// `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn bce_probs(&self, probs: Var, target: &Tensor) -> Var {
        let pv = self.value(probs);
        assert_eq!(pv.shape(), target.shape(), "bce_probs: shape mismatch");
        let count = pv.len() as f64;
        let total: f64 = pv
            .iter()
            .zip(target.iter())
            .map(|(&p, &y)| {
                let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum();
        let target = target.clone();
        self.push(scalar(total / count), &[probs], move || {
            Box::new(move |g: &Tensor| {
                let gs = grad_scalar(g) / count;
                let mut d = Tensor::zeros(pv.raw_dim());
                Zip::from(&mut d).and(&*pv).and(&target).for_each(|d, &p, &y| {
                    if p > PROB_EPS && p < 1.0 - PROB_EPS {
                        *d = -(y / p - (1.0 - y) / (1.0 - p)) * gs;
                    }
                });
                vec![Some(d)]
            })
        })
    }

    /// Soft Dice loss `1 - (2 sum(p y) + s) / (sum p + sum y + s)` over every
    /// element of the batch.
    pub fn soft_dice_loss(&self, probs: Var, target: &Tensor, smooth: f64) -> Var {
        let pv = self.value(probs);
        assert_eq!(pv.shape(), target.shape(), "soft_dice_loss: shape mismatch");
        let inter: f64 = pv.iter().zip(target.iter()).map(|(p, y)| p * y).sum();
        let denom = pv.sum() + target.sum() + smooth;
        let numer = 2.0 * inter + smooth;
        let target = target.clone();
        self.push(scalar(1.0 - numer / denom), &[probs], move || {
            Box::new(move |g: &Tensor| {
                let gs = grad_scalar(g);
                let d = target.mapv(|y| -gs * (2.0 * y * denom - numer) / (denom * denom));
                vec![Some(d)]
            })
        })
    }

    /// Mean squared difference.
    pub fn mse(&self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean(sq)
    }

    /// Pearson correlation of two equally sized tensors over all entries.
    /// A constant input has no defined correlation; it yields 0 with a zero
    /// gradient.
    pub fn pearson(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "pearson: element count mismatch");
        let n = av.len() as f64;
        let ma = av.sum() / n;
        let mb = bv.sum() / n;
        let ac: Vec<f64> = av.iter().map(|x| x - ma).collect();
        let bc: Vec<f64> = bv.iter().map(|x| x - mb).collect();
        let saa: f64 = ac.iter().map(|x| x * x).sum();
        let sbb: f64 = bc.iter().map(|x| x * x).sum();
        let sab: f64 = ac.iter().zip(&bc).map(|(x, y)| x * y).sum();
        let degenerate = saa <= f64::MIN_POSITIVE || sbb <= f64::MIN_POSITIVE;
        let r = if degenerate { 0.0 } else { (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0) };
        let (a_dim, b_dim) = (av.raw_dim(), bv.raw_dim());
        self.push(scalar(r), &[a, b], move || {
            Box::new(move |g: &Tensor| {
                if degenerate {
                    return vec![Some(Tensor::zeros(a_dim.clone())), Some(Tensor::zeros(b_dim.clone()))];
                }
                let gs = grad_scalar(g);
                let norm = (saa * sbb).sqrt();
                let da: Vec<f64> = ac.iter().zip(&bc).map(|(x, y)| gs * (y / norm - r * x / saa)).collect();
                let db: Vec<f64> = ac.iter().zip(&bc).map(|(x, y)| gs * (x / norm - r * y / sbb)).collect();
                vec![
                    Some(Tensor::from_shape_vec(a_dim.clone(), da).unwrap()),
                    Some(Tensor::from_shape_vec(b_dim.clone(), db).unwrap()),
                ]
            })
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn shrink(z: f64, lambda: f64) -> f64 {
    z.signum() * (z.abs() - lambda).max(0.0)
}
