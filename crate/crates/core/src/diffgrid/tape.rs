//! Reverse-mode differentiation over dense channel-major tensors.
//!
//! Each operation appends a node holding its value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates vector-Jacobian products.
//! Parameter nodes borrow their values from the [`ParamStore`].

use crate::datagen::Point;
use crate::error::{Error, Result};

use super::conv::{col2im, conv_out_len, gemm, im2col};
use super::params::{Array, ParamStore};
use super::setconv::{decode_weights, encode, Grid};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Param(usize),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Concat(Var, Var),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        cin: usize,
        n: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    ConvT {
        x: Var,
        w: Var,
        b: Option<Var>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Encode {
        log_ls: Var,
        d_log_ls: Vec<f64>,
        grid_len: usize,
    },
    Decode {
        feats: Var,
        log_ls: Var,
        channels: usize,
        grid_len: usize,
        phi: Vec<f64>,
        a: Vec<f64>,
    },
    CustomScalar {
        input: Var,
        grad: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Relu(_) => "relu",
            Op::Softplus(_) => "softplus",
            Op::Exp(_) => "exp",
            Op::Concat(..) => "concat",
            Op::Conv { .. } => "conv1d",
            Op::ConvT { .. } => "conv_transpose1d",
            Op::Encode { .. } => "setconv_encode",
            Op::Decode { .. } => "setconv_decode",
            Op::CustomScalar { .. } => "custom_scalar",
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match self.nodes[v.0].op {
            Op::Param(i) => &self.params.by_index(i).data,
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// The scalar held by a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let idx = self.nodes.len();
        if let Some(pos) = value.iter().position(|v| !v.is_finite()) {
            return Err(Error::numerical(format!(
                "non-finite value {} at node {idx} ({}), element {pos}",
                value[pos],
                op.name()
            )));
        }
        self.nodes.push(Node { shape, value, op });
        Ok(Var(idx))
    }

    /// Registers (once) and returns the node for a named parameter.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let idx = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        if let Some(v) = self.param_vars[idx] {
            return Ok(v);
        }
        let shape = self.params.by_index(idx).shape.clone();
        let v = Var(self.nodes.len());
        self.nodes.push(Node {
            shape,
            value: Vec::new(),
            op: Op::Param(idx),
        });
        self.param_vars[idx] = Some(v);
        Ok(v)
    }

    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::invalid("constant shape does not match data"));
        }
        self.push(shape, value, Op::Leaf)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::invalid(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        self.push(self.shape(a).to_vec(), value, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        self.push(self.shape(a).to_vec(), value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value(a).iter().map(|x| x * factor).collect();
        self.push(self.shape(a).to_vec(), value, Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        self.push(self.shape(a).to_vec(), value, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let value = self
            .value(a)
            .iter()
            .map(|&x| crate::linalg::softplus(x))
            .collect();
        self.push(self.shape(a).to_vec(), value, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).iter().map(|x| x.exp()).collect();
        self.push(self.shape(a).to_vec(), value, Op::Exp(a))
    }

    fn feature_map(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [c, n] => Ok((*c, *n)),
            s => Err(Error::invalid(format!(
                "{what}: expected [channels, length], got {s:?}"
            ))),
        }
    }

    /// Stacks two `[C, N]` maps along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, na) = self.feature_map(a, "concat")?;
        let (cb, nb) = self.feature_map(b, "concat")?;
        if na != nb {
            return Err(Error::invalid(format!(
                "concat: lengths {na} and {nb} differ"
            )));
        }
        let mut value = self.value(a).to_vec();
        value.extend_from_slice(self.value(b));
        self.push(vec![ca + cb, na], value, Op::Concat(a, b))
    }

    fn check_bias(&self, b: Option<Var>, cout: usize) -> Result<()> {
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::invalid(format!(
                    "bias shape {:?}, expected [{cout}]",
                    self.shape(b)
                )));
            }
        }
        Ok(())
    }

    /// Cross-correlation of `x: [Cin, N]` with `w: [Cout, Cin, K]`, zero
    /// padding `pad` on both sides.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (cin, n) = self.feature_map(x, "conv1d")?;
        let (cout, kernel) = match self.shape(w) {
            [co, ci, k] if *ci == cin => (*co, *k),
            s => {
                return Err(Error::invalid(format!(
                    "conv1d: weight {s:?} incompatible with {cin} input channels"
                )))
            }
        };
        self.check_bias(b, cout)?;
        let out_len = conv_out_len(n, kernel, stride, pad).ok_or_else(|| {
            Error::invalid(format!("conv1d: kernel {kernel} too long for length {n}"))
        })?;
        let cols = im2col(self.value(x), cin, n, kernel, stride, pad, out_len);
        let mut out = vec![0.0; cout * out_len];
        if let Some(b) = b {
            for (c, &bias) in self.value(b).iter().enumerate() {
                out[c * out_len..(c + 1) * out_len].fill(bias);
            }
        }
        gemm(
            cout,
            cin * kernel,
            out_len,
            self.value(w),
            false,
            &cols,
            false,
            &mut out,
            1.0,
        );
        self.push(
            vec![cout, out_len],
            out,
            Op::Conv {
                x,
                w,
                b,
                cin,
                n,
                kernel,
                stride,
                pad,
                cols,
            },
        )
    }

    /// Transposed convolution of `x: [Cin, N]` with `w: [Cin, Cout, K]`,
    /// producing `[Cout, out_len]`; the adjoint of [`Tape::conv1d`] with the
    /// same stride and padding.
    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_len: usize,
    ) -> Result<Var> {
        let (cin, nx) = self.feature_map(x, "conv_transpose1d")?;
        let (cout, kernel) = match self.shape(w) {
            [ci, co, k] if *ci == cin => (*co, *k),
            s => {
                return Err(Error::invalid(format!(
                    "conv_transpose1d: weight {s:?} incompatible with {cin} input channels"
                )))
            }
        };
        self.check_bias(b, cout)?;
        if conv_out_len(out_len, kernel, stride, pad) != Some(nx) {
            return Err(Error::invalid(format!(
                "conv_transpose1d: output length {out_len} does not map back to input length {nx}"
            )));
        }
        let mut cols = vec![0.0; cout * kernel * nx];
        gemm(
            cout * kernel,
            cin,
            nx,
            self.value(w),
            true,
            self.value(x),
            false,
            &mut cols,
            0.0,
        );
        let mut out = col2im(&cols, cout, out_len, kernel, stride, pad, nx);
        if let Some(b) = b {
            for (c, &bias) in self.value(b).iter().enumerate() {
                out[c * out_len..(c + 1) * out_len]
                    .iter_mut()
                    .for_each(|v| *v += bias);
            }
        }
        self.push(
            vec![cout, out_len],
            out,
            Op::ConvT {
                x,
                w,
                b,
                cin,
                cout,
                kernel,
                stride,
                pad,
            },
        )
    }

    /// Set-convolution encoder; `log_ls` holds one log-lengthscale per point
    /// channel. Output is `[2 * channels, grid.len]`.
    pub fn setconv_encode(
        &mut self,
        channels: &[&[Point]],
        grid: &Grid,
        log_ls: Var,
    ) -> Result<Var> {
        if self.shape(log_ls) != [channels.len()] {
            return Err(Error::invalid(
                "setconv_encode: one log-lengthscale per channel expected",
            ));
        }
        let ls: Vec<f64> = self.value(log_ls).iter().map(|v| v.exp()).collect();
        let enc = encode(channels, grid, &ls)?;
        self.push(
            vec![2 * channels.len(), grid.len],
            enc.features,
            Op::Encode {
                log_ls,
                d_log_ls: enc.d_log_ls,
                grid_len: grid.len,
            },
        )
    }

    /// Set-convolution decoder with one shared log-lengthscale (`log_ls: [1]`).
    /// Maps `[C, G]` grid features to `[C, Q]` query features.
    pub fn setconv_decode(
        &mut self,
        feats: Var,
        grid: &Grid,
        query: &[f64],
        log_ls: Var,
    ) -> Result<Var> {
        let (channels, g) = self.feature_map(feats, "setconv_decode")?;
        if g != grid.len {
            return Err(Error::invalid("setconv_decode: features do not match grid"));
        }
        if self.shape(log_ls).iter().product::<usize>() != 1 {
            return Err(Error::invalid(
                "setconv_decode: expected one log-lengthscale",
            ));
        }
        let (phi, a) = decode_weights(grid, query, self.value(log_ls)[0].exp());
        let mut out = vec![0.0; channels * query.len()];
        gemm(
            channels,
            g,
            query.len(),
            self.value(feats),
            false,
            &phi,
            false,
            &mut out,
            0.0,
        );
        self.push(
            vec![channels, query.len()],
            out,
            Op::Decode {
                feats,
                log_ls,
                channels,
                grid_len: g,
                phi,
                a,
            },
        )
    }

    /// A scalar computed outside the tape from `input`, with its gradient
    /// with respect to `input` supplied by the caller.
    pub fn custom_scalar(&mut self, input: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(input).len() {
            return Err(Error::invalid("custom_scalar: gradient length mismatch"));
        }
        if let Some(pos) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::numerical(format!(
                "non-finite gradient at node {} (custom_scalar), element {pos}",
                self.nodes.len()
            )));
        }
        self.push(Vec::new(), vec![value], Op::CustomScalar { input, grad })
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Result<Vec<Option<Vec<f64>>>> {
        if self.value(root).len() != 1 {
            return Err(Error::invalid("backward needs a scalar root"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e += x),
                slot => *slot = Some(g.to_vec()),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, &g);
                    acc(&mut grads, *b, &g);
                }
                Op::Mul(a, b) => {
                    let ga: Vec<f64> = g.iter().zip(self.value(*b)).map(|(x, y)| x * y).collect();
                    let gb: Vec<f64> = g.iter().zip(self.value(*a)).map(|(x, y)| x * y).collect();
                    acc(&mut grads, *a, &ga);
                    acc(&mut grads, *b, &gb);
                }
                Op::Scale(a, f) => {
                    let ga: Vec<f64> = g.iter().map(|x| x * f).collect();
                    acc(&mut grads, *a, &ga);
                }
                Op::Sum(a) => {
                    let ga = vec![g[0]; self.value(*a).len()];
                    acc(&mut grads, *a, &ga);
                }
                Op::Relu(a) => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(self.value(*a))
                        .map(|(x, &v)| if v > 0.0 { *x } else { 0.0 })
                        .collect();
                    acc(&mut grads, *a, &ga);
                }
                Op::Softplus(a) => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(self.value(*a))
                        .map(|(x, &v)| x * crate::linalg::sigmoid(v))
                        .collect();
                    acc(&mut grads, *a, &ga);
                }
                Op::Exp(a) => {
                    let ga: Vec<f64> = g.iter().zip(&node.value).map(|(x, y)| x * y).collect();
                    acc(&mut grads, *a, &ga);
                }
                Op::Concat(a, b) => {
                    let na = self.value(*a).len();
                    acc(&mut grads, *a, &g[..na]);
                    acc(&mut grads, *b, &g[na..]);
                }
                Op::Conv {
                    x,
                    w,
                    b,
                    cin,
                    n,
                    kernel,
                    stride,
                    pad,
                    cols,
                } => {
                    let (cout, out_len) = (node.shape[0], node.shape[1]);
                    let ck = cin * kernel;
                    if let Some(b) = b {
                        let gb: Vec<f64> = g.chunks(out_len).map(|r| r.iter().sum()).collect();
                        acc(&mut grads, *b, &gb);
                    }
                    let mut gw = vec![0.0; cout * ck];
                    gemm(cout, out_len, ck, &g, false, cols, true, &mut gw, 0.0);
                    acc(&mut grads, *w, &gw);
                    let mut gcols = vec![0.0; ck * out_len];
                    gemm(
                        ck,
                        cout,
                        out_len,
                        self.value(*w),
                        true,
                        &g,
                        false,
                        &mut gcols,
                        0.0,
                    );
                    let gx = col2im(&gcols, *cin, *n, *kernel, *stride, *pad, out_len);
                    acc(&mut grads, *x, &gx);
                }
                Op::ConvT {
                    x,
                    w,
                    b,
                    cin,
                    cout,
                    kernel,
                    stride,
                    pad,
                } => {
                    let out_len = node.shape[1];
                    let nx = self.shape(*x)[1];
                    if let Some(b) = b {
                        let gb: Vec<f64> = g.chunks(out_len).map(|r| r.iter().sum()).collect();
                        acc(&mut grads, *b, &gb);
                    }
                    let gcols = im2col(&g, *cout, out_len, *kernel, *stride, *pad, nx);
                    let mut gx = vec![0.0; cin * nx];
                    gemm(
                        *cin,
                        cout * kernel,
                        nx,
                        self.value(*w),
                        false,
                        &gcols,
                        false,
                        &mut gx,
                        0.0,
                    );
                    acc(&mut grads, *x, &gx);
                    let mut gw = vec![0.0; cin * cout * kernel];
                    gemm(
                        *cin,
                        nx,
                        cout * kernel,
                        self.value(*x),
                        false,
                        &gcols,
                        true,
                        &mut gw,
                        0.0,
                    );
                    acc(&mut grads, *w, &gw);
                }
                Op::Encode {
                    log_ls,
                    d_log_ls,
                    grid_len,
                } => {
                    let gl: Vec<f64> = g
                        .chunks(2 * grid_len)
                        .zip(d_log_ls.chunks(2 * grid_len))
                        .map(|(gc, dc)| gc.iter().zip(dc).map(|(x, y)| x * y).sum())
                        .collect();
                    acc(&mut grads, *log_ls, &gl);
                }
                Op::Decode {
                    feats,
                    log_ls,
                    channels,
                    grid_len,
                    phi,
                    a,
                } => {
                    let q = node.shape[1];
                    let mut gf = vec![0.0; channels * grid_len];
                    gemm(*channels, q, *grid_len, &g, false, phi, true, &mut gf, 0.0);
                    acc(&mut grads, *feats, &gf);
                    // d out[c,q] / d log l = sum_g feat[c,g] phi[g,q] a[g,q]
                    let mut m = vec![0.0; grid_len * q];
                    gemm(
                        *grid_len,
                        *channels,
                        q,
                        self.value(*feats),
                        true,
                        &g,
                        false,
                        &mut m,
                        0.0,
                    );
                    let gl: f64 = m
                        .iter()
                        .zip(phi)
                        .zip(a)
                        .map(|((mv, p), av)| mv * p * av)
                        .sum();
                    acc(&mut grads, *log_ls, &[gl]);
                }
                Op::CustomScalar { input, grad } => {
                    let gi: Vec<f64> = grad.iter().map(|v| v * g[0]).collect();
                    acc(&mut grads, *input, &gi);
                }
            }
        }
        Ok(grads)
    }

    /// Gradients of `root` for every parameter in the store (zeros where unused).
    pub fn param_gradients(&self, root: Var) -> Result<ParamStore> {
        let grads = self.backward(root)?;
        let mut out = self.params.zeros_like();
        for (idx, var) in self.param_vars.iter().enumerate() {
            if let Some(v) = var {
                if let Some(g) = &grads[v.0] {
                    out.by_index_mut(idx).data.copy_from_slice(g);
                }
            }
        }
        Ok(out)
    }
}

/// Evaluates a scalar objective built on a fresh tape and returns its value
/// together with exact gradients for every parameter.
pub fn value_and_grad<F>(params: &ParamStore, objective: F) -> Result<(f64, ParamStore)>
where
    F: FnOnce(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::new(params);
    let root = objective(&mut tape)?;
    let value = tape.scalar(root);
    let grads = tape.param_gradients(root)?;
    Ok((value, grads))
}

/// Builds a one-array store, handy for small objectives.
pub fn single_param(name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<ParamStore> {
    let mut p = ParamStore::new();
    p.insert(name, Array::new(shape, data)?)?;
    Ok(p)
}
