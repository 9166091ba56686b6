//! Layers with explicit forward caches and hand-written backward passes.
//!
//! Tensors are `channels x height x width` arrays for a single sample;
//! minibatches are handled by accumulating parameter gradients sample by sample.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayViewMut2, Axis};

/// A named tensor of weights together with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    /// Buffers such as batch-norm running statistics are stored but never updated.
    pub trainable: bool,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Self {
            shape,
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(shape: Vec<usize>, value: Vec<f64>) -> Self {
        Self {
            trainable: false,
            ..Self::new(shape, value)
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// View as a `rows x (len / rows)` matrix.
    pub(crate) fn matrix(&self) -> ArrayView2<'_, f64> {
        let rows = self.shape[0];
        ArrayView2::from_shape((rows, self.value.len() / rows), &self.value).expect("param shape")
    }

    pub(crate) fn grad_matrix_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        let rows = self.shape[0];
        let cols = self.grad.len() / rows;
        ArrayViewMut2::from_shape((rows, cols), &mut self.grad).expect("param shape")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out, in, k, k]`
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        let n = out_channels * in_channels * kernel * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::new(
                vec![out_channels, in_channels, kernel, kernel],
                vec![0.0; n],
            ),
            bias: bias.then(|| Param::new(vec![out_channels], vec![0.0; out_channels])),
        }
    }

    fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel;
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Array3<f64>) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let (oh, ow) = self.out_size(h, w);
        let k = self.kernel;
        let mut cols = Array2::zeros((c * k * k, oh * ow));
        let pad = self.padding as isize;
        for ci in 0..c {
            let plane = x.index_axis(Axis(0), ci);
            for ky in 0..k {
                for kx in 0..k {
                    let mut row = cols.row_mut((ci * k + ky) * k + kx);
                    let row = row.as_slice_mut().expect("contiguous");
                    for oy in 0..oh {
                        let iy = (oy * self.stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride) as isize + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                row[oy * ow + ox] = plane[(iy as usize, ix as usize)];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, in_dim: (usize, usize, usize)) -> Array3<f64> {
        let (c, h, w) = in_dim;
        let (oh, ow) = self.out_size(h, w);
        let k = self.kernel;
        let pad = self.padding as isize;
        let mut x = Array3::zeros(in_dim);
        for ci in 0..c {
            let mut plane = x.index_axis_mut(Axis(0), ci);
            for ky in 0..k {
                for kx in 0..k {
                    let row = cols.row((ci * k + ky) * k + kx);
                    let row = row.as_slice().expect("contiguous");
                    for oy in 0..oh {
                        let iy = (oy * self.stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride) as isize + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                plane[(iy as usize, ix as usize)] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, Cache) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (oh, ow) = self.out_size(h, w);
        let cols = self.im2col(x);
        let mut out = self.weight.matrix().dot(&cols);
        if let Some(b) = &self.bias {
            for (mut row, bv) in out.outer_iter_mut().zip(&b.value) {
                row += *bv;
            }
        }
        let out = out
            .into_shape_with_order((self.out_channels, oh, ow))
            .expect("conv output shape");
        (
            out,
            Cache::Conv {
                cols,
                in_dim: (c, h, w),
            },
        )
    }

    fn backward(
        &mut self,
        cols: &Array2<f64>,
        in_dim: (usize, usize, usize),
        grad: &Array3<f64>,
    ) -> Array3<f64> {
        let (oc, oh, ow) = grad.dim();
        let g = grad
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((oc, oh * ow))
            .expect("grad shape");
        self.weight
            .grad_matrix_mut()
            .scaled_add(1.0, &g.dot(&cols.t()));
        if let Some(b) = &mut self.bias {
            for (bg, row) in b.grad.iter_mut().zip(g.outer_iter()) {
                *bg += row.sum();
            }
        }
        let d_cols = self.weight.matrix().t().dot(&g);
        self.col2im(&d_cols, in_dim)
    }
}

/// Batch normalization with frozen running statistics (inference form).
///
/// The affine scale and shift are trainable; the running mean and variance
/// are buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub eps: f64,
    pub weight: Param,
    pub bias: Param,
    pub running_mean: Param,
    pub running_var: Param,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            eps: 1e-5,
            weight: Param::new(vec![channels], vec![1.0; channels]),
            bias: Param::new(vec![channels], vec![0.0; channels]),
            running_mean: Param::buffer(vec![channels], vec![0.0; channels]),
            running_var: Param::buffer(vec![channels], vec![1.0; channels]),
        }
    }

    fn inv_std(&self, c: usize) -> f64 {
        1.0 / (self.running_var.value[c] + self.eps).sqrt()
    }

    fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, Cache) {
        assert_eq!(x.dim().0, self.channels, "batch norm channels");
        let mut out = x.clone();
        for (c, mut plane) in out.outer_iter_mut().enumerate() {
            let scale = self.weight.value[c] * self.inv_std(c);
            let shift = self.bias.value[c] - self.running_mean.value[c] * scale;
            plane.mapv_inplace(|v| v * scale + shift);
        }
        (out, Cache::BatchNorm { input: x.clone() })
    }

    fn backward(&mut self, input: &Array3<f64>, grad: &Array3<f64>) -> Array3<f64> {
        let mut d_in = grad.clone();
        for c in 0..self.channels {
            let inv = self.inv_std(c);
            let mean = self.running_mean.value[c];
            let g = grad.index_axis(Axis(0), c);
            let x = input.index_axis(Axis(0), c);
            self.bias.grad[c] += g.sum();
            self.weight.grad[c] += g
                .iter()
                .zip(x.iter())
                .map(|(g, x)| g * (x - mean) * inv)
                .sum::<f64>();
            let scale = self.weight.value[c] * inv;
            d_in.index_axis_mut(Axis(0), c).mapv_inplace(|v| v * scale);
        }
        d_in
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolSpec {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    /// Input cells covered by output cell `(oy, ox)`, clipped to the input.
    fn window(&self, oy: usize, ox: usize, h: usize, w: usize) -> (usize, usize, usize, usize) {
        let y0 = (oy * self.stride) as isize - self.padding as isize;
        let x0 = (ox * self.stride) as isize - self.padding as isize;
        let y1 = (y0 + self.kernel as isize).min(h as isize);
        let x1 = (x0 + self.kernel as isize).min(w as isize);
        (
            y0.max(0) as usize,
            y1 as usize,
            x0.max(0) as usize,
            x1 as usize,
        )
    }
}

fn max_pool(spec: PoolSpec, x: &Array3<f64>) -> (Array3<f64>, Cache) {
    let (c, h, w) = x.dim();
    let (oh, ow) = spec.out_size(h, w);
    let mut out = Array3::zeros((c, oh, ow));
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let (y0, y1, x0, x1) = spec.window(oy, ox, h, w);
                let mut best = (y0, x0);
                let mut best_val = f64::NEG_INFINITY;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        let v = x[(ci, y, xx)];
                        if v > best_val {
                            best_val = v;
                            best = (y, xx);
                        }
                    }
                }
                out[(ci, oy, ox)] = best_val;
                argmax.push(best.0 * w + best.1);
            }
        }
    }
    (
        out,
        Cache::MaxPool {
            argmax,
            in_dim: (c, h, w),
        },
    )
}

fn max_pool_backward(
    argmax: &[usize],
    in_dim: (usize, usize, usize),
    grad: &Array3<f64>,
) -> Array3<f64> {
    let (c, h, w) = in_dim;
    let mut d_in = Array3::zeros(in_dim);
    let per_channel = grad.len() / c;
    for (i, g) in grad.iter().enumerate() {
        let ci = i / per_channel;
        let idx = argmax[i];
        d_in[(ci, idx / w, idx % w)] += g;
    }
    debug_assert_eq!(d_in.dim(), (c, h, w));
    d_in
}

/// Average pooling without padding.
fn avg_pool(spec: PoolSpec, x: &Array3<f64>) -> (Array3<f64>, Cache) {
    let (c, h, w) = x.dim();
    let (oh, ow) = spec.out_size(h, w);
    let area = (spec.kernel * spec.kernel) as f64;
    let mut out = Array3::zeros((c, oh, ow));
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let (y0, y1, x0, x1) = spec.window(oy, ox, h, w);
                out[(ci, oy, ox)] = x.slice(s![ci, y0..y1, x0..x1]).sum() / area;
            }
        }
    }
    (out, Cache::AvgPool { in_dim: (c, h, w) })
}

fn avg_pool_backward(
    spec: PoolSpec,
    in_dim: (usize, usize, usize),
    grad: &Array3<f64>,
) -> Array3<f64> {
    let (_, h, w) = in_dim;
    let area = (spec.kernel * spec.kernel) as f64;
    let mut d_in = Array3::zeros(in_dim);
    for ((ci, oy, ox), g) in grad.indexed_iter() {
        let (y0, y1, x0, x1) = spec.window(oy, ox, h, w);
        d_in.slice_mut(s![ci, y0..y1, x0..x1])
            .mapv_inplace(|v| v + g / area);
    }
    d_in
}

/// Each inner layer sees the channel concatenation of the block input and
/// every earlier inner layer's output; the block returns the full concatenation.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseBlock {
    pub layers: Vec<(String, Sequential)>,
}

impl DenseBlock {
    fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, Cache) {
        let mut acc = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut widths = Vec::with_capacity(self.layers.len());
        for (_, layer) in &self.layers {
            let (y, cache) = layer.forward(&acc);
            widths.push(acc.dim().0);
            acc = ndarray::concatenate(Axis(0), &[acc.view(), y.view()]).expect("concat");
            caches.push(cache);
        }
        (acc, Cache::Dense { caches, widths })
    }

    fn backward(
        &mut self,
        caches: Vec<Cache>,
        widths: &[usize],
        grad: &Array3<f64>,
    ) -> Array3<f64> {
        let mut d_acc = grad.clone();
        for ((_, layer), (cache, &width)) in self
            .layers
            .iter_mut()
            .zip(caches.into_iter().zip(widths))
            .rev()
        {
            let d_out = d_acc.slice(s![width.., .., ..]).to_owned();
            let d_in = layer.backward(cache, &d_out);
            let mut head = d_acc.slice(s![..width, .., ..]).to_owned();
            head += &d_in;
            d_acc = head;
        }
        d_acc
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    BatchNorm2d(BatchNorm2d),
    Relu,
    MaxPool2d(PoolSpec),
    AvgPool2d(PoolSpec),
    Dense(DenseBlock),
    Seq(Sequential),
}

/// Per-layer state saved by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub enum Cache {
    Conv {
        cols: Array2<f64>,
        in_dim: (usize, usize, usize),
    },
    BatchNorm {
        input: Array3<f64>,
    },
    Relu {
        output: Array3<f64>,
    },
    MaxPool {
        argmax: Vec<usize>,
        in_dim: (usize, usize, usize),
    },
    AvgPool {
        in_dim: (usize, usize, usize),
    },
    Dense {
        caches: Vec<Cache>,
        widths: Vec<usize>,
    },
    Seq(Vec<Cache>),
}

impl Layer {
    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, Cache) {
        match self {
            Layer::Conv2d(conv) => conv.forward(x),
            Layer::BatchNorm2d(bn) => bn.forward(x),
            Layer::Relu => {
                let out = x.mapv(|v| v.max(0.0));
                (out.clone(), Cache::Relu { output: out })
            }
            Layer::MaxPool2d(spec) => max_pool(*spec, x),
            Layer::AvgPool2d(spec) => avg_pool(*spec, x),
            Layer::Dense(block) => block.forward(x),
            Layer::Seq(seq) => seq.forward(x),
        }
    }

    pub fn backward(&mut self, cache: Cache, grad: &Array3<f64>) -> Array3<f64> {
        match (self, cache) {
            (Layer::Conv2d(conv), Cache::Conv { cols, in_dim }) => {
                conv.backward(&cols, in_dim, grad)
            }
            (Layer::BatchNorm2d(bn), Cache::BatchNorm { input }) => bn.backward(&input, grad),
            (Layer::Relu, Cache::Relu { output }) => {
                let mut d = grad.clone();
                d.zip_mut_with(&output, |g, &o| {
                    if o <= 0.0 {
                        *g = 0.0;
                    }
                });
                d
            }
            (Layer::MaxPool2d(_), Cache::MaxPool { argmax, in_dim }) => {
                max_pool_backward(&argmax, in_dim, grad)
            }
            (Layer::AvgPool2d(spec), Cache::AvgPool { in_dim }) => {
                avg_pool_backward(*spec, in_dim, grad)
            }
            (Layer::Dense(block), Cache::Dense { caches, widths }) => {
                block.backward(caches, &widths, grad)
            }
            (Layer::Seq(seq), cache @ Cache::Seq(_)) => seq.backward(cache, grad),
            (layer, cache) => panic!("cache {cache:?} does not belong to layer {layer:?}"),
        }
    }

    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        match self {
            Layer::Conv2d(conv) => {
                out.push((format!("{prefix}.weight"), &conv.weight));
                if let Some(b) = &conv.bias {
                    out.push((format!("{prefix}.bias"), b));
                }
            }
            Layer::BatchNorm2d(bn) => {
                out.push((format!("{prefix}.weight"), &bn.weight));
                out.push((format!("{prefix}.bias"), &bn.bias));
                out.push((format!("{prefix}.running_mean"), &bn.running_mean));
                out.push((format!("{prefix}.running_var"), &bn.running_var));
            }
            Layer::Dense(block) => {
                for (name, seq) in &block.layers {
                    seq.collect_params(&format!("{prefix}.{name}"), out);
                }
            }
            Layer::Seq(seq) => seq.collect_params(prefix, out),
            Layer::Relu | Layer::MaxPool2d(_) | Layer::AvgPool2d(_) => {}
        }
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        match self {
            Layer::Conv2d(conv) => {
                out.push((format!("{prefix}.weight"), &mut conv.weight));
                if let Some(b) = &mut conv.bias {
                    out.push((format!("{prefix}.bias"), b));
                }
            }
            Layer::BatchNorm2d(bn) => {
                out.push((format!("{prefix}.weight"), &mut bn.weight));
                out.push((format!("{prefix}.bias"), &mut bn.bias));
                out.push((format!("{prefix}.running_mean"), &mut bn.running_mean));
                out.push((format!("{prefix}.running_var"), &mut bn.running_var));
            }
            Layer::Dense(block) => {
                for (name, seq) in &mut block.layers {
                    seq.collect_params_mut(&format!("{prefix}.{name}"), out);
                }
            }
            Layer::Seq(seq) => seq.collect_params_mut(prefix, out),
            Layer::Relu | Layer::MaxPool2d(_) | Layer::AvgPool2d(_) => {}
        }
    }
}

/// Named layers applied in order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sequential {
    pub layers: Vec<(String, Layer)>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, layer: Layer) -> &mut Self {
        self.layers.push((name.into(), layer));
        self
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, Cache) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for (_, layer) in &self.layers {
            let (next, cache) = layer.forward(&cur);
            caches.push(cache);
            cur = next;
        }
        (cur, Cache::Seq(caches))
    }

    /// Forward pass without keeping caches.
    pub fn infer(&self, x: &Array3<f64>) -> Array3<f64> {
        let mut cur = x.clone();
        for (_, layer) in &self.layers {
            cur = layer.forward(&cur).0;
        }
        cur
    }

    pub fn backward(&mut self, cache: Cache, grad: &Array3<f64>) -> Array3<f64> {
        let Cache::Seq(caches) = cache else {
            panic!("sequential expects a sequence cache");
        };
        let mut g = grad.clone();
        for ((_, layer), cache) in self.layers.iter_mut().zip(caches).rev() {
            g = layer.backward(cache, &g);
        }
        g
    }

    pub fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        for (name, layer) in &self.layers {
            layer.collect_params(&join(prefix, name), out);
        }
    }

    pub fn collect_params_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, &'a mut Param)>,
    ) {
        for (name, layer) in &mut self.layers {
            layer.collect_params_mut(&join(prefix, name), out);
        }
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Spatial mean of every channel.
pub fn global_average_pool(x: &Array3<f64>) -> Array1<f64> {
    let (_, h, w) = x.dim();
    x.sum_axis(Axis(2)).sum_axis(Axis(1)) / (h * w) as f64
}
