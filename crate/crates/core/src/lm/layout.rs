//! Flat parameter layout. Every tensor lives in one contiguous `Vec<f64>`,
//! which keeps optimizer state, checksums and checkpoints trivial.

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut2};

use super::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn view2<'a>(&self, data: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &data[self.range()]).expect("layout shape")
    }

    pub fn view2_mut<'a>(&self, data: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut data[self.range()]).expect("layout shape")
    }

    pub fn view1<'a>(&self, data: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&data[self.range()])
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockLayout {
    pub ln1_g: TensorSpec,
    pub ln1_b: TensorSpec,
    pub w_qkv: TensorSpec,
    pub b_qkv: TensorSpec,
    pub w_o: TensorSpec,
    pub b_o: TensorSpec,
    pub ln2_g: TensorSpec,
    pub ln2_b: TensorSpec,
    pub w_fc: TensorSpec,
    pub b_fc: TensorSpec,
    pub w_proj: TensorSpec,
    pub b_proj: TensorSpec,
}

impl BlockLayout {
    pub fn tensors(&self) -> [(&'static str, TensorSpec); 12] {
        [
            ("ln1_g", self.ln1_g),
            ("ln1_b", self.ln1_b),
            ("w_qkv", self.w_qkv),
            ("b_qkv", self.b_qkv),
            ("w_o", self.w_o),
            ("b_o", self.b_o),
            ("ln2_g", self.ln2_g),
            ("ln2_b", self.ln2_b),
            ("w_fc", self.w_fc),
            ("b_fc", self.b_fc),
            ("w_proj", self.w_proj),
            ("b_proj", self.b_proj),
        ]
    }

    /// Contiguous range spanned by the block.
    pub fn range(&self) -> std::ops::Range<usize> {
        self.ln1_g.offset..self.b_proj.range().end
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub tok_emb: TensorSpec,
    pub pos_emb: TensorSpec,
    pub blocks: Vec<BlockLayout>,
    pub lnf_g: TensorSpec,
    pub lnf_b: TensorSpec,
    /// `None` when the output projection is tied to `tok_emb`.
    pub head: Option<TensorSpec>,
    pub total: usize,
}

struct Cursor(usize);

impl Cursor {
    fn take(&mut self, rows: usize, cols: usize) -> TensorSpec {
        let t = TensorSpec { offset: self.0, rows, cols };
        self.0 += rows * cols;
        t
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let v = cfg.vocab_size;
        let mut c = Cursor(0);
        let tok_emb = c.take(v, d);
        let pos_emb = c.take(cfg.max_seq_len, d);
        let blocks = (0..cfg.n_layers)
            .map(|_| BlockLayout {
                ln1_g: c.take(1, d),
                ln1_b: c.take(1, d),
                w_qkv: c.take(d, 3 * d),
                b_qkv: c.take(1, 3 * d),
                w_o: c.take(d, d),
                b_o: c.take(1, d),
                ln2_g: c.take(1, d),
                ln2_b: c.take(1, d),
                w_fc: c.take(d, 4 * d),
                b_fc: c.take(1, 4 * d),
                w_proj: c.take(4 * d, d),
                b_proj: c.take(1, d),
            })
            .collect();
        let lnf_g = c.take(1, d);
        let lnf_b = c.take(1, d);
        let head = (!cfg.tie_embeddings).then(|| c.take(v, d));
        Self { tok_emb, pos_emb, blocks, lnf_g, lnf_b, head, total: c.0 }
    }

    /// Output projection, `[vocab, d_model]`.
    pub fn output(&self) -> TensorSpec {
        self.head.unwrap_or(self.tok_emb)
    }

    /// Every tensor with a stable dotted name.
    pub fn named_tensors(&self) -> Vec<(String, TensorSpec)> {
        let mut out = vec![("tok_emb".to_string(), self.tok_emb), ("pos_emb".to_string(), self.pos_emb)];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in b.tensors() {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("lnf_g".to_string(), self.lnf_g));
        out.push(("lnf_b".to_string(), self.lnf_b));
        if let Some(h) = self.head {
            out.push(("head".to_string(), h));
        }
        out
    }
}
