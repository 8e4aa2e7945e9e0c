use super::Scalar;

/// Batched feature map in NHWC layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Map<T> {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Map<T> {
    pub fn zeros(n: usize, h: usize, w: usize, c: usize) -> Self {
        Map { n, h, w, c, data: vec![T::zero(); n * h * w * c] }
    }

    pub fn from_vec(n: usize, h: usize, w: usize, c: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), n * h * w * c, "map data length does not match shape");
        Map { n, h, w, c, data }
    }

    /// A batch of flat feature vectors, shaped `[n, 1, 1, c]`.
    pub fn vectors(n: usize, c: usize, data: Vec<T>) -> Self {
        Self::from_vec(n, 1, 1, c, data)
    }

    #[inline]
    pub fn idx(&self, b: usize, y: usize, x: usize, ch: usize) -> usize {
        ((b * self.h + y) * self.w + x) * self.c + ch
    }

    pub fn pixels(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn same_shape(&self, other: &Map<T>) -> bool {
        self.n == other.n && self.h == other.h && self.w == other.w && self.c == other.c
    }

    /// Pixel vector at flat pixel index `p` (`b * h * w + y * w + x`).
    pub fn pixel(&self, p: usize) -> &[T] {
        &self.data[p * self.c..(p + 1) * self.c]
    }

    /// Single batch item as a new map.
    pub fn item(&self, b: usize) -> Map<T> {
        let len = self.h * self.w * self.c;
        Map::from_vec(1, self.h, self.w, self.c, self.data[b * len..(b + 1) * len].to_vec())
    }

    pub fn stack(items: &[&Map<T>]) -> Map<T> {
        let first = items.first().expect("stack of zero maps");
        let mut data = Vec::with_capacity(items.iter().map(|m| m.data.len()).sum());
        let mut n = 0;
        for m in items {
            assert!(m.h == first.h && m.w == first.w && m.c == first.c, "stack shape mismatch");
            data.extend_from_slice(&m.data);
            n += m.n;
        }
        Map::from_vec(n, first.h, first.w, first.c, data)
    }

    pub fn cast<U: Scalar>(&self) -> Map<U> {
        Map {
            n: self.n,
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}
