//! Tape-based reverse-mode autodiff over NCHW tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are stored
//! in creation order, so a reverse sweep over the tape is a valid
//! topological order for backpropagation.

use std::collections::BTreeMap;

use crate::tensor::{gemm, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Identifies a learnable tensor owned outside the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKey {
    /// Index into the backbone's parameter list.
    Net(usize),
    /// Modulation scale at `(site, entry)`.
    Gamma(usize, usize),
    /// Modulation shift at `(site, entry)`.
    Beta(usize, usize),
}

enum Op<F> {
    Input,
    Leaf(Option<ParamKey>),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        kernel: usize,
        cols: Vec<F>,
    },
    ConvT2 {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Modulate {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        batch_stats: bool,
    },
    Relu(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Resize {
        x: Var,
        rows: Vec<(usize, usize, F)>,
        cols: Vec<(usize, usize, F)>,
    },
    Concat(Vec<Var>),
    Mask {
        x: Var,
        mask: Vec<F>,
    },
    L2Norm {
        x: Var,
        inv_norm: Vec<F>,
    },
    Mix {
        x: Var,
        matrix: Vec<F>,
    },
    Affine {
        x: Var,
        scale: F,
    },
    Square(Var),
    Mean(Var),
    Pick {
        x: Var,
        target: Vec<usize>,
    },
    MaxChannel {
        x: Var,
        index: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        target: Vec<usize>,
        probs: Vec<F>,
    },
    Dice {
        logits: Var,
        target: Vec<usize>,
        probs: Vec<F>,
        inter: Vec<F>,
        denom: Vec<F>,
        smooth: F,
    },
    WeightedSum(Vec<(Var, F)>),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    tracked: bool,
}

/// Per-pixel batch statistics produced by a train-mode modulation.
#[derive(Clone, Debug)]
pub struct ChannelStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn any_tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Differentiable leaf, optionally bound to an external parameter.
    pub fn leaf(&mut self, value: Tensor<F>, key: Option<ParamKey>) -> Var {
        self.push(value, Op::Leaf(key), true)
    }

    pub fn param(&mut self, value: Tensor<F>, key: ParamKey) -> Var {
        self.leaf(value, Some(key))
    }

    /// Stride-1 convolution with "same" zero padding; `kernel` is 1 or 3.
    /// Weight layout `[out, in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, kernel: usize) -> Var {
        assert!(kernel == 1 || kernel == 3, "unsupported kernel {kernel}");
        let (bs, cin, h, wd) = self.value(x).dims4();
        let wshape = self.value(w).shape().to_vec();
        assert_eq!(wshape, vec![wshape[0], cin, kernel, kernel], "conv weight shape");
        let cout = wshape[0];
        let hw = h * wd;
        let kdim = cin * kernel * kernel;
        let mut out = vec![F::zero(); bs * cout * hw];
        let mut cols = Vec::new();
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            if kernel == 3 {
                cols = vec![F::zero(); bs * kdim * hw];
                for bi in 0..bs {
                    im2col3(
                        &xv[bi * cin * hw..(bi + 1) * cin * hw],
                        cin,
                        h,
                        wd,
                        &mut cols[bi * kdim * hw..(bi + 1) * kdim * hw],
                    );
                }
            }
            for bi in 0..bs {
                let src = if kernel == 3 {
                    &cols[bi * kdim * hw..(bi + 1) * kdim * hw]
                } else {
                    &xv[bi * cin * hw..(bi + 1) * cin * hw]
                };
                let dst = &mut out[bi * cout * hw..(bi + 1) * cout * hw];
                gemm(cout, kdim, hw, F::one(), wv, false, src, false, F::zero(), dst);
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                assert_eq!(bv.len(), cout, "conv bias length");
                for (i, chunk) in out.chunks_mut(hw).enumerate() {
                    let bias = bv[i % cout];
                    chunk.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        let tracked = self.any_tracked(&parents);
        let value = Tensor::from_vec(&[bs, cout, h, wd], out).expect("conv output");
        self.push(value, Op::Conv { x, w, b, kernel, cols }, tracked)
    }

    /// 2x2 stride-2 transposed convolution. Weight layout `[in, out, 2, 2]`.
    pub fn conv_transpose2x2(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (bs, cin, h, wd) = self.value(x).dims4();
        let wshape = self.value(w).shape().to_vec();
        assert_eq!(wshape.len(), 4);
        assert_eq!(wshape[0], cin, "transposed conv input channels");
        assert_eq!(&wshape[2..], &[2, 2]);
        let cout = wshape[1];
        let hw = h * wd;
        let (oh, ow) = (2 * h, 2 * wd);
        let mut out = vec![F::zero(); bs * cout * oh * ow];
        let mut tmp = vec![F::zero(); cout * 4 * hw];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for bi in 0..bs {
                gemm(
                    cout * 4,
                    cin,
                    hw,
                    F::one(),
                    wv,
                    true,
                    &xv[bi * cin * hw..(bi + 1) * cin * hw],
                    false,
                    F::zero(),
                    &mut tmp,
                );
                let dst = &mut out[bi * cout * oh * ow..(bi + 1) * cout * oh * ow];
                for co in 0..cout {
                    for q in 0..4 {
                        let (dy, dx) = (q / 2, q % 2);
                        let row = &tmp[(co * 4 + q) * hw..(co * 4 + q + 1) * hw];
                        for y in 0..h {
                            for xx in 0..wd {
                                dst[(co * oh + 2 * y + dy) * ow + 2 * xx + dx] = row[y * wd + xx];
                            }
                        }
                    }
                }
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (i, chunk) in out.chunks_mut(oh * ow).enumerate() {
                    let bias = bv[i % cout];
                    chunk.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        let tracked = self.any_tracked(&parents);
        let value = Tensor::from_vec(&[bs, cout, oh, ow], out).expect("convT output");
        self.push(value, Op::ConvT2 { x, w, b }, tracked)
    }

    /// Per-channel affine normalization `gamma * (x - mean) / sqrt(var + eps) + beta`.
    ///
    /// With `running = None` the statistics of the current batch are used and
    /// returned; otherwise the provided `(mean, var)` are treated as constants.
    pub fn modulate(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[F], &[F])>,
        eps: F,
    ) -> (Var, Option<ChannelStats<F>>) {
        let (bs, ch, h, w) = self.value(x).dims4();
        let hw = h * w;
        let count = F::from_usize(bs * hw).unwrap();
        let xv = self.value(x).data();
        let (mean, var, batch_stats) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec(), false),
            None => {
                let mut mean = vec![F::zero(); ch];
                let mut var = vec![F::zero(); ch];
                for c in 0..ch {
                    let mut s = F::zero();
                    for bi in 0..bs {
                        s += xv[(bi * ch + c) * hw..(bi * ch + c + 1) * hw].iter().copied().sum();
                    }
                    let m = s / count;
                    let mut ss = F::zero();
                    for bi in 0..bs {
                        for &v in &xv[(bi * ch + c) * hw..(bi * ch + c + 1) * hw] {
                            let d = v - m;
                            ss += d * d;
                        }
                    }
                    mean[c] = m;
                    var[c] = ss / count;
                }
                (mean, var, true)
            }
        };
        let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        assert_eq!(gv.len(), ch, "gamma length");
        assert_eq!(bv.len(), ch, "beta length");
        let mut xhat = vec![F::zero(); xv.len()];
        let mut out = vec![F::zero(); xv.len()];
        for bi in 0..bs {
            for c in 0..ch {
                let range = (bi * ch + c) * hw..(bi * ch + c + 1) * hw;
                let (m, is, g, b) = (mean[c], inv_std[c], gv[c], bv[c]);
                for i in range {
                    let n = (xv[i] - m) * is;
                    xhat[i] = n;
                    out[i] = g * n + b;
                }
            }
        }
        let tracked = self.any_tracked(&[x, gamma, beta]);
        let value = Tensor::from_vec(&[bs, ch, h, w], out).expect("modulate output");
        let stats = batch_stats.then(|| ChannelStats {
            mean: mean.clone(),
            var: var.clone(),
        });
        let v = self.push(
            value,
            Op::Modulate {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            tracked,
        );
        (v, stats)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v.max(F::zero())).collect();
        let value = Tensor::from_vec(xv.shape(), data).unwrap();
        let tracked = self.any_tracked(&[x]);
        self.push(value, Op::Relu(x), tracked)
    }

    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (bs, ch, h, w) = self.value(x).dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even dims");
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); bs * ch * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for plane in 0..bs * ch {
            let base = plane * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    let o = plane * oh * ow + y * ow + xx;
                    out[o] = xv[best];
                    argmax[o] = best;
                }
            }
        }
        let tracked = self.any_tracked(&[x]);
        let value = Tensor::from_vec(&[bs, ch, oh, ow], out).unwrap();
        self.push(value, Op::MaxPool2 { x, argmax }, tracked)
    }

    /// Bilinear resize (half-pixel centers, edge clamped).
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let (bs, ch, h, w) = self.value(x).dims4();
        let rows = bilinear_plan::<F>(h, out_h);
        let cols = bilinear_plan::<F>(w, out_w);
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); bs * ch * out_h * out_w];
        for plane in 0..bs * ch {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
            for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                    let top = src[y0 * w + x0] * (F::one() - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (F::one() - fx) + src[y1 * w + x1] * fx;
                    dst[oy * out_w + ox] = top * (F::one() - fy) + bot * fy;
                }
            }
        }
        let tracked = self.any_tracked(&[x]);
        let value = Tensor::from_vec(&[bs, ch, out_h, out_w], out).unwrap();
        self.push(value, Op::Resize { x, rows, cols }, tracked)
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let (bs, _, h, w) = self.value(xs[0]).dims4();
        let mut total = 0;
        for &v in xs {
            let (b2, c2, h2, w2) = self.value(v).dims4();
            assert_eq!((b2, h2, w2), (bs, h, w), "concat spatial mismatch");
            total += c2;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(bs * total * hw);
        for bi in 0..bs {
            for &v in xs {
                let c = self.value(v).shape()[1];
                out.extend_from_slice(&self.value(v).data()[bi * c * hw..(bi + 1) * c * hw]);
            }
        }
        let tracked = self.any_tracked(xs);
        let value = Tensor::from_vec(&[bs, total, h, w], out).unwrap();
        self.push(value, Op::Concat(xs.to_vec()), tracked)
    }

    /// Elementwise product with a constant mask of the same shape.
    pub fn mask(&mut self, x: Var, mask: Vec<F>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), mask.len(), "mask length");
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::from_vec(xv.shape(), data).unwrap();
        let tracked = self.any_tracked(&[x]);
        self.push(value, Op::Mask { x, mask }, tracked)
    }

    /// Per-pixel L2 normalization across channels.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let (bs, ch, h, w) = self.value(x).dims4();
        let hw = h * w;
        let xv = self.value(x).data();
        let mut inv_norm = vec![F::zero(); bs * hw];
        let mut out = vec![F::zero(); xv.len()];
        let tiny = F::lit(1e-12);
        let uniform = F::one() / F::from_usize(ch).unwrap().sqrt();
        for bi in 0..bs {
            for p in 0..hw {
                let mut ss = F::zero();
                for c in 0..ch {
                    let v = xv[(bi * ch + c) * hw + p];
                    ss += v * v;
                }
                let norm = ss.sqrt();
                if norm <= tiny {
                    // degenerate vector: emit the uniform direction, no gradient
                    for c in 0..ch {
                        out[(bi * ch + c) * hw + p] = uniform;
                    }
                    continue;
                }
                let inv = F::one() / norm;
                inv_norm[bi * hw + p] = inv;
                for c in 0..ch {
                    let i = (bi * ch + c) * hw + p;
                    out[i] = xv[i] * inv;
                }
            }
        }
        let tracked = self.any_tracked(&[x]);
        let value = Tensor::from_vec(&[bs, ch, h, w], out).unwrap();
        self.push(value, Op::L2Norm { x, inv_norm }, tracked)
    }

    /// Constant channel mixing: `out[b, r, p] = sum_c matrix[r, c] * x[b, c, p]`.
    /// `matrix` is row-major `[rows, channels]`.
    pub fn mix_channels(&mut self, x: Var, matrix: &[F], rows: usize) -> Var {
        let (bs, ch, h, w) = self.value(x).dims4();
        assert_eq!(matrix.len(), rows * ch, "mix matrix shape");
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); bs * rows * hw];
        for bi in 0..bs {
            gemm(
                rows,
                ch,
                hw,
                F::one(),
                matrix,
                false,
                &xv[bi * ch * hw..(bi + 1) * ch * hw],
                false,
                F::zero(),
                &mut out[bi * rows * hw..(bi + 1) * rows * hw],
            );
        }
        let tracked = self.any_tracked(&[x]);
        let value = Tensor::from_vec(&[bs, rows, h, w], out).unwrap();
        self.push(
            value,
            Op::Mix {
                x,
                matrix: matrix.to_vec(),
            },
            tracked,
        )
    }

    /// `scale * x + offset`.
    pub fn affine(&mut self, x: Var, scale: F, offset: F) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| scale * v + offset).collect();
        let value = Tensor::from_vec(xv.shape(), data).unwrap();
        let tracked = self.any_tracked(&[x]);
        self.push(value, Op::Affine { x, scale }, tracked)
    }

    pub fn scale(&mut self, x: Var, scale: F) -> Var {
        self.affine(x, scale, F::zero())
    }

    pub fn square(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * v).collect();
        let value = Tensor::from_vec(xv.shape(), data).unwrap();
        let tracked = self.any_tracked(&[x]);
        self.push(value, Op::Square(x), tracked)
    }

    /// Mean of all elements, as a one-element tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = F::from_usize(xv.len()).unwrap();
        let s: F = xv.data().iter().copied().sum();
        let tracked = self.any_tracked(&[x]);
        self.push(Tensor::scalar(s / n), Op::Mean(x), tracked)
    }

    /// Gathers `x[b, target[b, p], p]` into a `[B, 1, H, W]` tensor.
    pub fn pick(&mut self, x: Var, target: &[usize]) -> Var {
        let (bs, ch, h, w) = self.value(x).dims4();
        let hw = h * w;
        assert_eq!(target.len(), bs * hw, "pick target length");
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); bs * hw];
        for bi in 0..bs {
            for p in 0..hw {
                let t = target[bi * hw + p];
                assert!(t < ch, "pick target out of range");
                out[bi * hw + p] = xv[(bi * ch + t) * hw + p];
            }
        }
        let tracked = self.any_tracked(&[x]);
        let value = Tensor::from_vec(&[bs, 1, h, w], out).unwrap();
        self.push(
            value,
            Op::Pick {
                x,
                target: target.to_vec(),
            },
            tracked,
        )
    }

    /// Channel-wise maximum; ties resolve to the lowest channel.
    pub fn max_channel(&mut self, x: Var) -> Var {
        let (bs, ch, h, w) = self.value(x).dims4();
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); bs * hw];
        let mut index = vec![0usize; bs * hw];
        for bi in 0..bs {
            for p in 0..hw {
                let mut best = 0;
                let mut bv = xv[bi * ch * hw + p];
                for c in 1..ch {
                    let v = xv[(bi * ch + c) * hw + p];
                    if v > bv {
                        bv = v;
                        best = c;
                    }
                }
                out[bi * hw + p] = bv;
                index[bi * hw + p] = best;
            }
        }
        let tracked = self.any_tracked(&[x]);
        let value = Tensor::from_vec(&[bs, 1, h, w], out).unwrap();
        self.push(value, Op::MaxChannel { x, index }, tracked)
    }

    /// Softmax cross-entropy over channels, averaged over all pixels.
    pub fn cross_entropy(&mut self, logits: Var, target: &[usize]) -> Var {
        let (bs, ch, h, w) = self.value(logits).dims4();
        let hw = h * w;
        assert_eq!(target.len(), bs * hw, "cross_entropy target length");
        let probs = softmax_channels(self.value(logits).data(), bs, ch, hw);
        let lv = self.value(logits).data();
        let mut total = F::zero();
        for bi in 0..bs {
            for p in 0..hw {
                let t = target[bi * hw + p];
                assert!(t < ch, "cross_entropy target out of range");
                let mut m = F::neg_infinity();
                for c in 0..ch {
                    m = m.max(lv[(bi * ch + c) * hw + p]);
                }
                let mut s = F::zero();
                for c in 0..ch {
                    s += (lv[(bi * ch + c) * hw + p] - m).exp();
                }
                total += m + s.ln() - lv[(bi * ch + t) * hw + p];
            }
        }
        let n = F::from_usize(bs * hw).unwrap();
        let tracked = self.any_tracked(&[logits]);
        self.push(
            Tensor::scalar(total / n),
            Op::CrossEntropy {
                logits,
                target: target.to_vec(),
                probs,
            },
            tracked,
        )
    }

    /// Soft Dice loss on `softmax(logits)`: one minus the mean Dice score over
    /// foreground classes `1..C`, each computed over the whole batch.
    pub fn dice_loss(&mut self, logits: Var, target: &[usize], smooth: F) -> Var {
        let (bs, ch, h, w) = self.value(logits).dims4();
        assert!(ch >= 2, "dice needs at least two classes");
        let hw = h * w;
        assert_eq!(target.len(), bs * hw, "dice target length");
        let probs = softmax_channels(self.value(logits).data(), bs, ch, hw);
        let mut inter = vec![F::zero(); ch];
        let mut denom = vec![F::zero(); ch];
        for bi in 0..bs {
            for p in 0..hw {
                let t = target[bi * hw + p];
                assert!(t < ch, "dice target out of range");
                for c in 0..ch {
                    let pr = probs[(bi * ch + c) * hw + p];
                    denom[c] += pr;
                    if c == t {
                        inter[c] += pr;
                        denom[c] += F::one();
                    }
                }
            }
        }
        let two = F::lit(2.0);
        let fg = F::from_usize(ch - 1).unwrap();
        let mut score = F::zero();
        for c in 1..ch {
            score += (two * inter[c] + smooth) / (denom[c] + smooth);
        }
        let loss = F::one() - score / fg;
        let tracked = self.any_tracked(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::Dice {
                logits,
                target: target.to_vec(),
                probs,
                inter,
                denom,
                smooth,
            },
            tracked,
        )
    }

    /// `sum_i weight_i * term_i` over one-element tensors.
    pub fn weighted_sum(&mut self, terms: &[(Var, F)]) -> Var {
        let mut s = F::zero();
        for &(v, wt) in terms {
            s += wt * self.value(v).item();
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let tracked = self.any_tracked(&vars);
        self.push(Tensor::scalar(s), Op::WeightedSum(terms.to_vec()), tracked)
    }

    /// A one-element constant, handy for disabled loss terms.
    pub fn constant_scalar(&mut self, v: F) -> Var {
        self.input(Tensor::scalar(v))
    }

    /// Reverse sweep from a scalar `root` with seed gradient 1.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), F::one()));
        for id in (0..=root.0).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            if !self.nodes[id].tracked {
                continue;
            }
            self.backprop_node(id, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        let mut params = BTreeMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf(Some(key)) = node.op {
                if let Some(g) = &grads[id] {
                    params
                        .entry(key)
                        .and_modify(|acc: &mut Tensor<F>| acc.add_assign(g))
                        .or_insert_with(|| g.clone());
                }
            }
        }
        Gradients { nodes: grads, params }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, f: impl FnOnce(&mut [F])) {
        if !self.nodes[v.0].tracked {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn backprop_node(&self, id: usize, gout: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let g = gout.data();
        match &self.nodes[id].op {
            Op::Input | Op::Leaf(_) => {}
            Op::Conv {
                x,
                w,
                b,
                kernel,
                cols,
            } => {
                let (bs, cin, h, wd) = self.value(*x).dims4();
                let cout = self.value(*w).shape()[0];
                let hw = h * wd;
                let kdim = cin * kernel * kernel;
                let xv = self.value(*x).data();
                if let Some(b) = b {
                    self.accumulate(grads, *b, |db| {
                        for (i, chunk) in g.chunks(hw).enumerate() {
                            db[i % cout] += chunk.iter().copied().sum();
                        }
                    });
                }
                self.accumulate(grads, *w, |dw| {
                    for bi in 0..bs {
                        let src = if *kernel == 3 {
                            &cols[bi * kdim * hw..(bi + 1) * kdim * hw]
                        } else {
                            &xv[bi * cin * hw..(bi + 1) * cin * hw]
                        };
                        gemm(
                            cout,
                            hw,
                            kdim,
                            F::one(),
                            &g[bi * cout * hw..(bi + 1) * cout * hw],
                            false,
                            src,
                            true,
                            F::one(),
                            dw,
                        );
                    }
                });
                let wv = self.value(*w).data();
                self.accumulate(grads, *x, |dx| {
                    let mut dcols = vec![F::zero(); kdim * hw];
                    for bi in 0..bs {
                        let gb = &g[bi * cout * hw..(bi + 1) * cout * hw];
                        let dxb = &mut dx[bi * cin * hw..(bi + 1) * cin * hw];
                        if *kernel == 3 {
                            gemm(kdim, cout, hw, F::one(), wv, true, gb, false, F::zero(), &mut dcols);
                            col2im3(&dcols, cin, h, wd, dxb);
                        } else {
                            gemm(kdim, cout, hw, F::one(), wv, true, gb, false, F::one(), dxb);
                        }
                    }
                });
            }
            Op::ConvT2 { x, w, b } => {
                let (bs, cin, h, wd) = self.value(*x).dims4();
                let cout = self.value(*w).shape()[1];
                let hw = h * wd;
                let (oh, ow) = (2 * h, 2 * wd);
                if let Some(b) = b {
                    self.accumulate(grads, *b, |db| {
                        for (i, chunk) in g.chunks(oh * ow).enumerate() {
                            db[i % cout] += chunk.iter().copied().sum();
                        }
                    });
                }
                // regroup output gradient into [cout*4, hw] per batch item
                let mut regrouped = vec![F::zero(); bs * cout * 4 * hw];
                for bi in 0..bs {
                    let src = &g[bi * cout * oh * ow..(bi + 1) * cout * oh * ow];
                    let dst = &mut regrouped[bi * cout * 4 * hw..(bi + 1) * cout * 4 * hw];
                    for co in 0..cout {
                        for q in 0..4 {
                            let (dy, dx) = (q / 2, q % 2);
                            for y in 0..h {
                                for xx in 0..wd {
                                    dst[(co * 4 + q) * hw + y * wd + xx] =
                                        src[(co * oh + 2 * y + dy) * ow + 2 * xx + dx];
                                }
                            }
                        }
                    }
                }
                let xv = self.value(*x).data();
                self.accumulate(grads, *w, |dw| {
                    for bi in 0..bs {
                        gemm(
                            cin,
                            hw,
                            cout * 4,
                            F::one(),
                            &xv[bi * cin * hw..(bi + 1) * cin * hw],
                            false,
                            &regrouped[bi * cout * 4 * hw..(bi + 1) * cout * 4 * hw],
                            true,
                            F::one(),
                            dw,
                        );
                    }
                });
                let wv = self.value(*w).data();
                self.accumulate(grads, *x, |dx| {
                    for bi in 0..bs {
                        gemm(
                            cin,
                            cout * 4,
                            hw,
                            F::one(),
                            wv,
                            false,
                            &regrouped[bi * cout * 4 * hw..(bi + 1) * cout * 4 * hw],
                            false,
                            F::one(),
                            &mut dx[bi * cin * hw..(bi + 1) * cin * hw],
                        );
                    }
                });
            }
            Op::Modulate {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (bs, ch, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let gv = self.value(*gamma).data();
                let mut sum_g = vec![F::zero(); ch];
                let mut sum_gx = vec![F::zero(); ch];
                for bi in 0..bs {
                    for c in 0..ch {
                        let r = (bi * ch + c) * hw..(bi * ch + c + 1) * hw;
                        for i in r {
                            sum_g[c] += g[i];
                            sum_gx[c] += g[i] * xhat[i];
                        }
                    }
                }
                self.accumulate(grads, *beta, |db| {
                    for c in 0..ch {
                        db[c] += sum_g[c];
                    }
                });
                self.accumulate(grads, *gamma, |dg| {
                    for c in 0..ch {
                        dg[c] += sum_gx[c];
                    }
                });
                let n = F::from_usize(bs * hw).unwrap();
                self.accumulate(grads, *x, |dx| {
                    for bi in 0..bs {
                        for c in 0..ch {
                            let scale = gv[c] * inv_std[c];
                            let r = (bi * ch + c) * hw..(bi * ch + c + 1) * hw;
                            if *batch_stats {
                                let mg = sum_g[c] / n;
                                let mgx = sum_gx[c] / n;
                                for i in r {
                                    dx[i] += scale * (g[i] - mg - xhat[i] * mgx);
                                }
                            } else {
                                for i in r {
                                    dx[i] += scale * g[i];
                                }
                            }
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |dx| {
                    for i in 0..dx.len() {
                        if xv[i] > F::zero() {
                            dx[i] += g[i];
                        }
                    }
                });
            }
            Op::MaxPool2 { x, argmax } => {
                self.accumulate(grads, *x, |dx| {
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src] += g[o];
                    }
                });
            }
            Op::Resize { x, rows, cols } => {
                let (bs, ch, h, w) = self.value(*x).dims4();
                let (oh, ow) = (rows.len(), cols.len());
                self.accumulate(grads, *x, |dx| {
                    for plane in 0..bs * ch {
                        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                        let src = &g[plane * oh * ow..(plane + 1) * oh * ow];
                        for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                                let v = src[oy * ow + ox];
                                let top = v * (F::one() - fy);
                                let bot = v * fy;
                                dst[y0 * w + x0] += top * (F::one() - fx);
                                dst[y0 * w + x1] += top * fx;
                                dst[y1 * w + x0] += bot * (F::one() - fx);
                                dst[y1 * w + x1] += bot * fx;
                            }
                        }
                    }
                });
            }
            Op::Concat(xs) => {
                let (bs, total, h, w) = gout.dims4();
                let hw = h * w;
                let mut offset = 0;
                for &v in xs {
                    let c = self.value(v).shape()[1];
                    self.accumulate(grads, v, |dx| {
                        for bi in 0..bs {
                            let src = &g[(bi * total + offset) * hw..(bi * total + offset + c) * hw];
                            for (d, s) in dx[bi * c * hw..(bi + 1) * c * hw].iter_mut().zip(src) {
                                *d += *s;
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::Mask { x, mask } => {
                self.accumulate(grads, *x, |dx| {
                    for i in 0..dx.len() {
                        dx[i] += g[i] * mask[i];
                    }
                });
            }
            Op::L2Norm { x, inv_norm } => {
                let (bs, ch, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let y = self.nodes[id].value.data();
                self.accumulate(grads, *x, |dx| {
                    for bi in 0..bs {
                        for p in 0..hw {
                            let mut dot = F::zero();
                            for c in 0..ch {
                                let i = (bi * ch + c) * hw + p;
                                dot += y[i] * g[i];
                            }
                            let inv = inv_norm[bi * hw + p];
                            for c in 0..ch {
                                let i = (bi * ch + c) * hw + p;
                                dx[i] += (g[i] - y[i] * dot) * inv;
                            }
                        }
                    }
                });
            }
            Op::Mix { x, matrix } => {
                let (bs, ch, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let rows = matrix.len() / ch;
                self.accumulate(grads, *x, |dx| {
                    for bi in 0..bs {
                        gemm(
                            ch,
                            rows,
                            hw,
                            F::one(),
                            matrix,
                            true,
                            &g[bi * rows * hw..(bi + 1) * rows * hw],
                            false,
                            F::one(),
                            &mut dx[bi * ch * hw..(bi + 1) * ch * hw],
                        );
                    }
                });
            }
            Op::Affine { x, scale } => {
                self.accumulate(grads, *x, |dx| {
                    for i in 0..dx.len() {
                        dx[i] += *scale * g[i];
                    }
                });
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                let two = F::lit(2.0);
                self.accumulate(grads, *x, |dx| {
                    for i in 0..dx.len() {
                        dx[i] += two * xv[i] * g[i];
                    }
                });
            }
            Op::Mean(x) => {
                let n = F::from_usize(self.value(*x).len()).unwrap();
                let gi = g[0] / n;
                self.accumulate(grads, *x, |dx| dx.iter_mut().for_each(|d| *d += gi));
            }
            Op::Pick { x, target } => {
                let (bs, ch, h, w) = self.value(*x).dims4();
                let hw = h * w;
                self.accumulate(grads, *x, |dx| {
                    for bi in 0..bs {
                        for p in 0..hw {
                            let t = target[bi * hw + p];
                            dx[(bi * ch + t) * hw + p] += g[bi * hw + p];
                        }
                    }
                });
            }
            Op::MaxChannel { x, index } => {
                let (bs, ch, h, w) = self.value(*x).dims4();
                let hw = h * w;
                self.accumulate(grads, *x, |dx| {
                    for bi in 0..bs {
                        for p in 0..hw {
                            let c = index[bi * hw + p];
                            dx[(bi * ch + c) * hw + p] += g[bi * hw + p];
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let (bs, ch, h, w) = self.value(*logits).dims4();
                let hw = h * w;
                let scale = g[0] / F::from_usize(bs * hw).unwrap();
                self.accumulate(grads, *logits, |dx| {
                    for bi in 0..bs {
                        for p in 0..hw {
                            let t = target[bi * hw + p];
                            for c in 0..ch {
                                let i = (bi * ch + c) * hw + p;
                                let onehot = if c == t { F::one() } else { F::zero() };
                                dx[i] += scale * (probs[i] - onehot);
                            }
                        }
                    }
                });
            }
            Op::Dice {
                logits,
                target,
                probs,
                inter,
                denom,
                smooth,
            } => {
                let (bs, ch, h, w) = self.value(*logits).dims4();
                let hw = h * w;
                let two = F::lit(2.0);
                let fg = F::from_usize(ch - 1).unwrap();
                // d loss / d prob[c, n] = -(1/fg) * (2 t (D + s) - (2 I + s)) / (D + s)^2
                let mut coef_t = vec![F::zero(); ch];
                let mut coef_all = vec![F::zero(); ch];
                for c in 1..ch {
                    let d = denom[c] + *smooth;
                    coef_t[c] = -two / (d * fg);
                    coef_all[c] = (two * inter[c] + *smooth) / (d * d * fg);
                }
                self.accumulate(grads, *logits, |dx| {
                    let mut dp = vec![F::zero(); ch];
                    for bi in 0..bs {
                        for p in 0..hw {
                            let t = target[bi * hw + p];
                            let mut dot = F::zero();
                            for c in 0..ch {
                                let mut v = coef_all[c];
                                if c == t {
                                    v += coef_t[c];
                                }
                                dp[c] = v * g[0];
                                dot += dp[c] * probs[(bi * ch + c) * hw + p];
                            }
                            for c in 0..ch {
                                let i = (bi * ch + c) * hw + p;
                                dx[i] += probs[i] * (dp[c] - dot);
                            }
                        }
                    }
                });
            }
            Op::WeightedSum(terms) => {
                for &(v, wt) in terms {
                    self.accumulate(grads, v, |dx| dx[0] += wt * g[0]);
                }
            }
        }
    }
}

/// Gradients from one backward sweep.
pub struct Gradients<F> {
    nodes: Vec<Option<Tensor<F>>>,
    params: BTreeMap<ParamKey, Tensor<F>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the root with respect to `v`, if any flowed there.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    /// Parameter gradients summed over every leaf bound to the same key.
    pub fn params(&self) -> &BTreeMap<ParamKey, Tensor<F>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<ParamKey, Tensor<F>> {
        self.params
    }
}

/// Accumulates parameter gradients across several backward sweeps.
pub fn merge_param_grads<F: Scalar>(
    acc: &mut BTreeMap<ParamKey, Tensor<F>>,
    more: BTreeMap<ParamKey, Tensor<F>>,
) {
    for (k, g) in more {
        match acc.get_mut(&k) {
            Some(t) => t.add_assign(&g),
            None => {
                acc.insert(k, g);
            }
        }
    }
}

pub(crate) fn softmax_channels<F: Scalar>(data: &[F], bs: usize, ch: usize, hw: usize) -> Vec<F> {
    let mut out = vec![F::zero(); data.len()];
    for bi in 0..bs {
        for p in 0..hw {
            let mut m = F::neg_infinity();
            for c in 0..ch {
                m = m.max(data[(bi * ch + c) * hw + p]);
            }
            let mut s = F::zero();
            for c in 0..ch {
                let i = (bi * ch + c) * hw + p;
                let e = (data[i] - m).exp();
                out[i] = e;
                s += e;
            }
            for c in 0..ch {
                out[(bi * ch + c) * hw + p] /= s;
            }
        }
    }
    out
}

fn bilinear_plan<F: Scalar>(input: usize, output: usize) -> Vec<(usize, usize, F)> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, F::lit(frac))
        })
        .collect()
}

fn im2col3<F: Scalar>(x: &[F], cin: usize, h: usize, w: usize, cols: &mut [F]) {
    let hw = h * w;
    for c in 0..cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 3 + ky) * 3 + kx) * hw..((c * 3 + ky) * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = F::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = F::zero();
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = F::zero();
                        }
                    }
                }
            }
        }
    }
}

fn col2im3<F: Scalar>(cols: &[F], cin: usize, h: usize, w: usize, dx: &mut [F]) {
    let hw = h * w;
    for c in 0..cin {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 3 + ky) * 3 + kx) * hw..((c * 3 + ky) * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            for i in 1..w {
                                dst[i - 1] += src[i];
                            }
                        }
                        1 => {
                            for i in 0..w {
                                dst[i] += src[i];
                            }
                        }
                        _ => {
                            for i in 0..w - 1 {
                                dst[i + 1] += src[i];
                            }
                        }
                    }
                }
            }
        }
    }
}
