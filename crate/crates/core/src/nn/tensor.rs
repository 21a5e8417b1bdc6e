//! NCHW tensors and trainable parameters.

/// A dense f32 tensor in NCHW layout. Vectors are carried as `[n, c, 1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length mismatch");
        Self { n, c, h, w, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Size of one sample (C·H·W).
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [f32] {
        let len = self.sample_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.n == other.n && self.c == other.c && self.h == other.h && self.w == other.w
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

/// Concatenates two tensors along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.n, b.n);
    assert_eq!(a.h, b.h);
    assert_eq!(a.w, b.w);
    let plane = a.plane();
    let mut out = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
    for n in 0..a.n {
        let dst = out.sample_mut(n);
        dst[..a.c * plane].copy_from_slice(a.sample(n));
        dst[a.c * plane..].copy_from_slice(b.sample(n));
    }
    out
}

/// Splits a tensor along the channel axis after `c_first` channels.
pub fn split_channels(x: &Tensor, c_first: usize) -> (Tensor, Tensor) {
    assert!(c_first <= x.c);
    let plane = x.plane();
    let mut a = Tensor::zeros(x.n, c_first, x.h, x.w);
    let mut b = Tensor::zeros(x.n, x.c - c_first, x.h, x.w);
    for n in 0..x.n {
        let src = x.sample(n);
        a.sample_mut(n).copy_from_slice(&src[..c_first * plane]);
        b.sample_mut(n).copy_from_slice(&src[c_first * plane..]);
    }
    (a, b)
}

/// A named trainable parameter with its gradient and Adam moments.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub grad: Vec<f32>,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        let len = data.len();
        assert_eq!(len, shape.iter().product::<usize>(), "param shape mismatch");
        Self {
            name: name.into(),
            shape,
            data,
            grad: vec![0.0; len],
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}
