use crate::error::{Error, Result};

/// Dense row-major `f64` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a matrix; a vector counts as a single column.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (*n, 1),
            [r, c] => (*r, *c),
            s => panic!("tensor of shape {s:?} is not a matrix"),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = self.dims2();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ParamEntry {
    name: String,
    tensor: Tensor,
    row_sparse: bool,
}

/// Named trainable tensors. Ids are indices in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.push(name.into(), tensor, false)
    }

    /// Registers a lookup table whose gradients only touch a few rows at a time.
    pub fn add_row_sparse(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        assert_eq!(tensor.shape().len(), 2, "row-sparse parameters must be matrices");
        self.push(name.into(), tensor, true)
    }

    fn push(&mut self, name: String, tensor: Tensor, row_sparse: bool) -> ParamId {
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry {
            name,
            tensor,
            row_sparse,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_row_sparse(&self, id: ParamId) -> bool {
        self.entries[id.0].row_sparse
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.is_finite())
    }
}

#[derive(Clone, Debug)]
struct GradBuf {
    data: Vec<f64>,
    /// Row width and touched-row bookkeeping for row-sparse parameters.
    sparse: Option<SparseRows>,
}

#[derive(Clone, Debug)]
struct SparseRows {
    width: usize,
    mask: Vec<bool>,
    touched: Vec<usize>,
}

/// Gradient buffers shaped like a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads {
    bufs: Vec<GradBuf>,
}

impl Grads {
    pub fn zeros_like(params: &ParamStore) -> Self {
        let bufs = params
            .entries
            .iter()
            .map(|e| GradBuf {
                data: vec![0.0; e.tensor.len()],
                sparse: e.row_sparse.then(|| {
                    let (rows, width) = e.tensor.dims2();
                    SparseRows {
                        width,
                        mask: vec![false; rows],
                        touched: Vec::new(),
                    }
                }),
            })
            .collect();
        Grads { bufs }
    }

    pub fn len(&self) -> usize {
        self.bufs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bufs.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.bufs[id.0].data
    }

    /// Mutable access to a whole buffer. For row-sparse parameters every row
    /// is marked as touched.
    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        let buf = &mut self.bufs[id.0];
        if let Some(sp) = &mut buf.sparse {
            for (r, m) in sp.mask.iter_mut().enumerate() {
                if !*m {
                    *m = true;
                    sp.touched.push(r);
                }
            }
        }
        &mut buf.data
    }

    pub fn row_mut(&mut self, id: ParamId, row: usize) -> &mut [f64] {
        let buf = &mut self.bufs[id.0];
        let width = match &mut buf.sparse {
            Some(sp) => {
                if !sp.mask[row] {
                    sp.mask[row] = true;
                    sp.touched.push(row);
                }
                sp.width
            }
            None => panic!("row access on a dense gradient"),
        };
        &mut buf.data[row * width..(row + 1) * width]
    }

    pub fn clear(&mut self) {
        for buf in &mut self.bufs {
            match &mut buf.sparse {
                Some(sp) => {
                    for &r in &sp.touched {
                        buf.data[r * sp.width..(r + 1) * sp.width].fill(0.0);
                        sp.mask[r] = false;
                    }
                    sp.touched.clear();
                }
                None => buf.data.fill(0.0),
            }
        }
    }

    /// `self += other`, visiting only touched rows of row-sparse buffers.
    pub fn add_assign(&mut self, other: &Grads) {
        for (dst, src) in self.bufs.iter_mut().zip(&other.bufs) {
            match (&mut dst.sparse, &src.sparse) {
                (Some(dsp), Some(ssp)) => {
                    let w = ssp.width;
                    for &r in &ssp.touched {
                        if !dsp.mask[r] {
                            dsp.mask[r] = true;
                            dsp.touched.push(r);
                        }
                        for (d, s) in dst.data[r * w..(r + 1) * w]
                            .iter_mut()
                            .zip(&src.data[r * w..(r + 1) * w])
                        {
                            *d += s;
                        }
                    }
                }
                _ => {
                    for (d, s) in dst.data.iter_mut().zip(&src.data) {
                        *d += s;
                    }
                }
            }
        }
    }

    fn for_each_active(&self, mut f: impl FnMut(&[f64])) {
        for buf in &self.bufs {
            match &buf.sparse {
                Some(sp) => {
                    for &r in &sp.touched {
                        f(&buf.data[r * sp.width..(r + 1) * sp.width]);
                    }
                }
                None => f(&buf.data),
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        let mut sq = 0.0;
        self.for_each_active(|s| sq += s.iter().map(|v| v * v).sum::<f64>());
        sq.sqrt()
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_active(|s| ok &= s.iter().all(|v| v.is_finite()));
        ok
    }

    pub fn scale(&mut self, factor: f64) {
        for buf in &mut self.bufs {
            match &buf.sparse {
                Some(sp) => {
                    for &r in &sp.touched {
                        for v in &mut buf.data[r * sp.width..(r + 1) * sp.width] {
                            *v *= factor;
                        }
                    }
                }
                None => buf.data.iter_mut().for_each(|v| *v *= factor),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_checked() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::new(&[2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(t.row(1), &[3.0, 4.0, 5.0]);
        assert_eq!(Tensor::vector(vec![1.0, 2.0]).dims2(), (2, 1));
    }

    #[test]
    fn sparse_grads_track_rows() {
        let mut store = ParamStore::new();
        let table = store.add_row_sparse("table", Tensor::zeros(&[5, 2]));
        let bias = store.add("bias", Tensor::zeros(&[2]));
        let mut g = Grads::zeros_like(&store);
        g.row_mut(table, 3).copy_from_slice(&[3.0, 4.0]);
        g.get_mut(bias)[0] = 12.0;
        assert!((g.global_norm() - 13.0).abs() < 1e-12);

        let mut total = Grads::zeros_like(&store);
        total.add_assign(&g);
        total.add_assign(&g);
        assert_eq!(&total.get(table)[6..8], &[6.0, 8.0]);
        assert_eq!(total.get(bias)[0], 24.0);

        total.clear();
        assert_eq!(total.global_norm(), 0.0);
        assert!(total.get(table).iter().all(|&v| v == 0.0));
    }
}
