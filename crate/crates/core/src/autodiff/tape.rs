use super::tensor::{broadcast_map, broadcast_shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Log(Var),
    Exp(Var),
    Sigmoid(Var),
    Softplus(Var),
    HalfRectify(Var),
    SteFloor(Var),
    SteThreshold(Var),
    Sum(Var),
    Mean(Var),
    Max(Var, usize),
    Reshape(Var),
    Slice(Var, usize),
    Stack(Vec<Var>),
    Gather(Var, Vec<usize>),
    Upsample(Var, usize),
    BilinearSample(Var, Vec<[f64; 2]>),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: Conv2dSpec,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Append-only record of a forward computation.
///
/// Every node's inputs precede it, so a single reverse sweep is a valid
/// backward schedule. Nodes built only from constants are untracked and skipped.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Accumulated `d loss / d node` for every tracked node reachable from the loss.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to `v`, zeros when no path reaches it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        let shape = tape.value(v).shape().to_vec();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let tracked = self.tracked(&[a]);
        self.push(value, op, tracked)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let value = if sa == sb {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            Tensor::new(sa.to_vec(), da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect())?
        } else {
            let out = broadcast_shape(sa, sb).ok_or_else(|| Error::shape(name, format!("{sa:?}"), format!("{sb:?}")))?;
            let (ma, mb) = (broadcast_map(&out, sa), broadcast_map(&out, sb));
            let (da, db) = (self.value(a).data(), self.value(b).data());
            let data = ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect();
            Tensor::new(out, data)?
        };
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Elementwise minimum; ties route gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, Op::Minimum(a, b), f64::min)
    }

    /// Elementwise maximum; ties route gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, Op::Maximum(a, b), f64::max)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| k * x)
    }

    pub fn shift(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Shift(a), |x| x + k)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                reason: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    /// `h(x) = max(x, 0)`; the subgradient at 0 is 0.
    pub fn half_rectify(&mut self, a: Var) -> Var {
        self.unary(a, Op::HalfRectify(a), |x| x.max(0.0))
    }

    /// Forward `floor`, backward identity.
    pub fn ste_floor(&mut self, a: Var) -> Var {
        self.unary(a, Op::SteFloor(a), f64::floor)
    }

    /// Forward `1 if x > 0.5 else 0`, backward identity.
    pub fn ste_threshold(&mut self, a: Var) -> Var {
        self.unary(a, Op::SteThreshold(a), |x| if x > 0.5 { 1.0 } else { 0.0 })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let tracked = self.tracked(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.value(a).data();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let tracked = self.tracked(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), tracked)
    }

    /// Maximum element; gradient flows to the first index attaining it.
    pub fn max(&mut self, a: Var) -> Result<Var> {
        let d = self.value(a).data();
        if d.is_empty() {
            return Err(Error::shape("max", "non-empty tensor", "0 elements"));
        }
        let mut arg = 0;
        for (i, &v) in d.iter().enumerate() {
            if v > d[arg] {
                arg = i;
            }
        }
        let m = d[arg];
        let tracked = self.tracked(&[a]);
        Ok(self.push(Tensor::scalar(m), Op::Max(a, arg), tracked))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        let tracked = self.tracked(&[a]);
        Ok(self.push(value, Op::Reshape(a), tracked))
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || start > end || end > shape[0] {
            return Err(Error::shape("slice", format!("range within leading axis of {shape:?}"), format!("{start}..{end}")));
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.value(a).data()[start * inner..end * inner].to_vec();
        let mut out = shape.clone();
        out[0] = end - start;
        let value = Tensor::new(out, data)?;
        let tracked = self.tracked(&[a]);
        Ok(self.push(value, Op::Slice(a, start), tracked))
    }

    /// Leading-axis element `index`, with that axis removed.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var> {
        let s = self.slice(a, index, index + 1)?;
        let shape = self.shape(a)[1..].to_vec();
        self.reshape(s, &shape)
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("stack", "at least one tensor", "none"))?;
        let inner = self.shape(*first).to_vec();
        let mut data = Vec::with_capacity(inner.iter().product::<usize>() * parts.len());
        for &p in parts {
            if self.shape(p) != inner.as_slice() {
                return Err(Error::shape("stack", format!("{inner:?}"), format!("{:?}", self.shape(p))));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&inner);
        let tracked = self.tracked(parts);
        Ok(self.push(Tensor::new(shape, data)?, Op::Stack(parts.to_vec()), tracked))
    }

    /// Flat-index gather into a 1-D tensor; backward scatter-adds.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let d = self.value(a).data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= d.len()) {
            return Err(Error::shape("gather", format!("indices < {}", d.len()), bad));
        }
        let data = indices.iter().map(|&i| d[i]).collect();
        let tracked = self.tracked(&[a]);
        Ok(self.push(Tensor::new(vec![indices.len()], data)?, Op::Gather(a, indices.to_vec()), tracked))
    }

    /// Nearest-neighbour upsampling of a 2-D tensor by an integer factor.
    pub fn upsample(&mut self, a: Var, factor: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || factor == 0 {
            return Err(Error::shape("upsample", "2-D input and factor >= 1", format!("{shape:?}, factor {factor}")));
        }
        let (h, w) = (shape[0], shape[1]);
        let src = self.value(a).data();
        let (oh, ow) = (h * factor, w * factor);
        let mut data = Vec::with_capacity(oh * ow);
        for y in 0..oh {
            let row = &src[(y / factor) * w..(y / factor + 1) * w];
            for x in 0..ow {
                data.push(row[x / factor]);
            }
        }
        let tracked = self.tracked(&[a]);
        Ok(self.push(Tensor::new(vec![oh, ow], data)?, Op::Upsample(a, factor), tracked))
    }

    /// Samples a 2-D image at continuous `(x, y)` points, where pixel `(row i, col j)`
    /// has its center at `(j, i)`. Coordinates are clamped to the image (edge padding).
    pub fn bilinear_sample(&mut self, image: Var, coords: Vec<[f64; 2]>, out_shape: &[usize]) -> Result<Var> {
        let shape = self.shape(image).to_vec();
        if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
            return Err(Error::shape("bilinear_sample", "non-empty 2-D image", format!("{shape:?}")));
        }
        if out_shape.iter().product::<usize>() != coords.len() {
            return Err(Error::shape("bilinear_sample", format!("{} coordinates", out_shape.iter().product::<usize>()), coords.len()));
        }
        let (h, w) = (shape[0], shape[1]);
        let img = self.value(image).data();
        let data = coords
            .iter()
            .map(|&c| {
                bilinear_taps(c, h, w)
                    .iter()
                    .map(|&(i, wt)| wt * img[i])
                    .sum()
            })
            .collect();
        let tracked = self.tracked(&[image]);
        Ok(self.push(Tensor::new(out_shape.to_vec(), data)?, Op::BilinearSample(image, coords), tracked))
    }

    /// 2-D cross-correlation: input `[C, H, W]`, weight `[O, C, K, K]`, bias `[O]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let is = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        if is.len() != 3 || ws.len() != 4 || ws[1] != is[0] || ws[2] != ws[3] || spec.stride == 0 {
            return Err(Error::shape("conv2d", format!("input [C,H,W] with C = {}", ws.get(1).copied().unwrap_or(0)), format!("input {is:?}, weight {ws:?}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape("conv2d bias", format!("[{}]", ws[0]), format!("{:?}", self.shape(b))));
            }
        }
        let g = ConvGeom::new(&is, &ws, spec)?;
        let x = self.value(input).data();
        let k = self.value(weight).data();
        let mut out = vec![0.0; g.o * g.oh * g.ow];
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for o in 0..g.o {
                out[o * g.oh * g.ow..(o + 1) * g.oh * g.ow].fill(bv[o]);
            }
        }
        let active = g.active_channels(x);
        for o in 0..g.o {
            let out_o = &mut out[o * g.oh * g.ow..(o + 1) * g.oh * g.ow];
            for &c in &active {
                let x_c = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let wv = k[((o * g.c + c) * g.k + ky) * g.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        g.for_each_tap(ky, kx, |oi, ii| out_o[oi] += wv * x_c[ii]);
                    }
                }
            }
        }
        let mut vars = vec![input, weight];
        vars.extend(bias);
        let tracked = self.tracked(&vars);
        let value = Tensor::new(vec![g.o, g.oh, g.ow], out)?;
        Ok(self.push(value, Op::Conv2d { input, weight, bias, spec }, tracked))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].tracked {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.accum_broadcast(*a, node, grads, |i, _| g[i]);
                self.accum_broadcast(*b, node, grads, |i, _| g[i]);
            }
            Op::Sub(a, b) => {
                self.accum_broadcast(*a, node, grads, |i, _| g[i]);
                self.accum_broadcast(*b, node, grads, |i, _| -g[i]);
            }
            Op::Mul(a, b) => {
                let (ma, mb) = self.maps(*a, *b, node);
                let (da, db) = (val(*a), val(*b));
                self.accum_broadcast(*a, node, grads, |i, _| g[i] * db[mb[i]]);
                self.accum_broadcast(*b, node, grads, |i, _| g[i] * da[ma[i]]);
            }
            Op::Div(a, b) => {
                let (ma, mb) = self.maps(*a, *b, node);
                let (da, db) = (val(*a), val(*b));
                self.accum_broadcast(*a, node, grads, |i, _| g[i] / db[mb[i]]);
                self.accum_broadcast(*b, node, grads, |i, _| {
                    let y = db[mb[i]];
                    -g[i] * da[ma[i]] / (y * y)
                });
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let is_min = matches!(node.op, Op::Minimum(..));
                let (ma, mb) = self.maps(*a, *b, node);
                let (da, db) = (val(*a), val(*b));
                let pick_a = |i: usize| {
                    let (x, y) = (da[ma[i]], db[mb[i]]);
                    if is_min { x <= y } else { x >= y }
                };
                self.accum_broadcast(*a, node, grads, |i, _| if pick_a(i) { g[i] } else { 0.0 });
                self.accum_broadcast(*b, node, grads, |i, _| if pick_a(i) { 0.0 } else { g[i] });
            }
            Op::Scale(a, k) => self.accum(*a, grads, |i| k * g[i]),
            Op::Shift(a) | Op::SteFloor(a) | Op::SteThreshold(a) | Op::Reshape(a) => self.accum(*a, grads, |i| g[i]),
            Op::Log(a) => {
                let x = val(*a);
                self.accum(*a, grads, |i| g[i] / x[i]);
            }
            Op::Exp(a) => {
                let y = node.value.data();
                self.accum(*a, grads, |i| g[i] * y[i]);
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                self.accum(*a, grads, |i| g[i] * y[i] * (1.0 - y[i]));
            }
            Op::Softplus(a) => {
                let x = val(*a);
                self.accum(*a, grads, |i| g[i] * sigmoid(x[i]));
            }
            Op::HalfRectify(a) => {
                let x = val(*a);
                self.accum(*a, grads, |i| if x[i] > 0.0 { g[i] } else { 0.0 });
            }
            Op::Sum(a) => self.accum(*a, grads, |_| g[0]),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                self.accum(*a, grads, |_| g[0] / n);
            }
            Op::Max(a, arg) => self.accum(*a, grads, |i| if i == *arg { g[0] } else { 0.0 }),
            Op::Slice(a, start) => {
                if let Some(buf) = self.grad_buf(*a, grads) {
                    let inner: usize = self.shape(*a)[1..].iter().product();
                    for (dst, &src) in buf[start * inner..].iter_mut().zip(g) {
                        *dst += src;
                    }
                }
            }
            Op::Stack(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    if let Some(buf) = self.grad_buf(p, grads) {
                        for (dst, &src) in buf.iter_mut().zip(&g[off..off + n]) {
                            *dst += src;
                        }
                    }
                    off += n;
                }
            }
            Op::Gather(a, indices) => {
                if let Some(buf) = self.grad_buf(*a, grads) {
                    for (&i, &gi) in indices.iter().zip(g) {
                        buf[i] += gi;
                    }
                }
            }
            Op::Upsample(a, factor) => {
                let w = self.shape(*a)[1];
                let ow = w * factor;
                if let Some(buf) = self.grad_buf(*a, grads) {
                    for (idx, &gi) in g.iter().enumerate() {
                        let (y, x) = (idx / ow, idx % ow);
                        buf[(y / factor) * w + x / factor] += gi;
                    }
                }
            }
            Op::BilinearSample(image, coords) => {
                let s = self.shape(*image);
                let (h, w) = (s[0], s[1]);
                if let Some(buf) = self.grad_buf(*image, grads) {
                    for (&c, &gi) in coords.iter().zip(g) {
                        for (i, wt) in bilinear_taps(c, h, w) {
                            buf[i] += wt * gi;
                        }
                    }
                }
            }
            Op::Conv2d { input, weight, bias, spec } => {
                let geom = ConvGeom::new(self.shape(*input), self.shape(*weight), *spec).expect("recorded conv geometry");
                let x = val(*input);
                let k = val(*weight);
                let plane = geom.oh * geom.ow;
                if let Some(b) = bias {
                    if let Some(buf) = self.grad_buf(*b, grads) {
                        for (o, slot) in buf.iter_mut().enumerate() {
                            *slot += g[o * plane..(o + 1) * plane].iter().sum::<f64>();
                        }
                    }
                }
                if let Some(buf) = self.grad_buf(*weight, grads) {
                    let active = geom.active_channels(x);
                    for o in 0..geom.o {
                        let g_o = &g[o * plane..(o + 1) * plane];
                        for &c in &active {
                            let x_c = &x[c * geom.h * geom.w..(c + 1) * geom.h * geom.w];
                            for ky in 0..geom.k {
                                for kx in 0..geom.k {
                                    let mut acc = 0.0;
                                    geom.for_each_tap(ky, kx, |oi, ii| acc += g_o[oi] * x_c[ii]);
                                    buf[((o * geom.c + c) * geom.k + ky) * geom.k + kx] += acc;
                                }
                            }
                        }
                    }
                }
                if let Some(buf) = self.grad_buf(*input, grads) {
                    for o in 0..geom.o {
                        let g_o = &g[o * plane..(o + 1) * plane];
                        for c in 0..geom.c {
                            let b_c = &mut buf[c * geom.h * geom.w..(c + 1) * geom.h * geom.w];
                            for ky in 0..geom.k {
                                for kx in 0..geom.k {
                                    let wv = k[((o * geom.c + c) * geom.k + ky) * geom.k + kx];
                                    if wv == 0.0 {
                                        continue;
                                    }
                                    geom.for_each_tap(ky, kx, |oi, ii| b_c[ii] += wv * g_o[oi]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn grad_buf<'g>(&self, v: Var, grads: &'g mut [Option<Vec<f64>>]) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].tracked {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn accum(&self, v: Var, grads: &mut [Option<Vec<f64>>], f: impl Fn(usize) -> f64) {
        if let Some(buf) = self.grad_buf(v, grads) {
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot += f(i);
            }
        }
    }

    fn maps(&self, a: Var, b: Var, node: &Node) -> (Vec<usize>, Vec<usize>) {
        let out = node.value.shape();
        let map = |v: Var| {
            if self.shape(v) == out {
                (0..node.value.len()).collect()
            } else {
                broadcast_map(out, self.shape(v))
            }
        };
        (map(a), map(b))
    }

    /// Adds `f(out_index, src_index)` into the gradient of a broadcast operand.
    fn accum_broadcast(&self, v: Var, node: &Node, grads: &mut [Option<Vec<f64>>], f: impl Fn(usize, usize) -> f64) {
        let same = self.shape(v) == node.value.shape();
        let map = if same { None } else { Some(broadcast_map(node.value.shape(), self.shape(v))) };
        if let Some(buf) = self.grad_buf(v, grads) {
            match map {
                None => {
                    for (i, slot) in buf.iter_mut().enumerate() {
                        *slot += f(i, i);
                    }
                }
                Some(map) => {
                    for (i, &j) in map.iter().enumerate() {
                        buf[j] += f(i, j);
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Four bilinear taps `(flat index, weight)` for a clamped sample point.
fn bilinear_taps(c: [f64; 2], h: usize, w: usize) -> [(usize, f64); 4] {
    let x = c[0].clamp(0.0, (w - 1) as f64);
    let y = c[1].clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    [
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ]
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(is: &[usize], ws: &[usize], spec: Conv2dSpec) -> Result<Self> {
        let (c, h, w) = (is[0], is[1], is[2]);
        let (o, k) = (ws[0], ws[2]);
        if h + 2 * spec.padding < k || w + 2 * spec.padding < k {
            return Err(Error::shape("conv2d", format!("spatial size >= kernel {k}"), format!("{h}x{w} with padding {}", spec.padding)));
        }
        let oh = (h + 2 * spec.padding - k) / spec.stride + 1;
        let ow = (w + 2 * spec.padding - k) / spec.stride + 1;
        Ok(ConvGeom {
            c,
            h,
            w,
            o,
            k,
            oh,
            ow,
            stride: spec.stride,
            pad: spec.padding,
        })
    }

    /// Input channels with at least one nonzero entry; all-zero planes contribute nothing.
    fn active_channels(&self, x: &[f64]) -> Vec<usize> {
        (0..self.c)
            .filter(|&c| x[c * self.h * self.w..(c + 1) * self.h * self.w].iter().any(|&v| v != 0.0))
            .collect()
    }

    /// Calls `f(output_index, input_index)` for every in-bounds pairing of kernel tap `(ky, kx)`.
    #[inline]
    fn for_each_tap(&self, ky: usize, kx: usize, mut f: impl FnMut(usize, usize)) {
        // first output coordinate whose input coordinate is >= 0
        let first = |kk: usize| (self.pad.saturating_sub(kk) + self.stride - 1) / self.stride;
        let (oy0, ox0) = (first(ky), first(kx));
        for oy in oy0..self.oh {
            let iy = oy * self.stride + ky - self.pad;
            if iy >= self.h {
                break;
            }
            let orow = oy * self.ow;
            let irow = iy * self.w;
            for ox in ox0..self.ow {
                let ix = ox * self.stride + kx - self.pad;
                if ix >= self.w {
                    break;
                }
                f(orow + ox, irow + ix);
            }
        }
    }
}
