//! Primitive forward/backward ops recorded on the tape.

use super::{Tape, TapeOp, Tensor, Value};
use crate::error::{Error, Result};

fn shape_err(op: &str, detail: String) -> Error {
    Error::precondition(format!("{op}: {detail}"))
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(shape_err(op, format!("shapes {:?} and {:?} differ", a.shape, b.shape)));
    }
    Ok(())
}

macro_rules! elementwise_binary {
    ($method:ident, $opname:literal, $struct:ident, $fwd:expr, $bwd:expr) => {
        struct $struct;

        impl TapeOp for $struct {
            fn name(&self) -> &'static str {
                $opname
            }
            fn backward(&self, _out: &Tensor, g: &[f64], inputs: &[&Tensor]) -> Vec<Vec<f64>> {
                let (a, b) = (inputs[0], inputs[1]);
                let mut da = vec![0.0; a.len()];
                let mut db = vec![0.0; b.len()];
                for i in 0..a.len() {
                    let (ga, gb) = $bwd(a.values[i], b.values[i], g[i]);
                    da[i] = ga;
                    db[i] = gb;
                }
                vec![da, db]
            }
        }

        impl Tape {
            pub fn $method(&mut self, a: Value, b: Value) -> Result<Value> {
                same_shape($opname, self.value(a), self.value(b))?;
                let (ta, tb) = (self.value(a), self.value(b));
                let values: Vec<f64> = ta
                    .values
                    .iter()
                    .zip(tb.values.iter())
                    .map(|(&x, &y)| $fwd(x, y))
                    .collect();
                let t = Tensor { shape: ta.shape.clone(), values, grad: None };
                self.push_op(&[a, b], t, Box::new($struct))
            }
        }
    };
}

elementwise_binary!(add, "add", AddOp, |x: f64, y: f64| x + y, |_x, _y, g: f64| (g, g));
elementwise_binary!(sub, "sub", SubOp, |x: f64, y: f64| x - y, |_x, _y, g: f64| (g, -g));
elementwise_binary!(mul, "mul", MulOp, |x: f64, y: f64| x * y, |x: f64, y: f64, g: f64| {
    (g * y, g * x)
});
// Ties route the gradient to the first operand.
elementwise_binary!(max, "max", MaxOp, |x: f64, y: f64| x.max(y), |x: f64, y: f64, g: f64| {
    if x >= y {
        (g, 0.0)
    } else {
        (0.0, g)
    }
});

macro_rules! elementwise_unary {
    ($method:ident, $opname:literal, $struct:ident, $fwd:expr, $bwd:expr) => {
        struct $struct;

        impl TapeOp for $struct {
            fn name(&self) -> &'static str {
                $opname
            }
            fn backward(&self, out: &Tensor, g: &[f64], inputs: &[&Tensor]) -> Vec<Vec<f64>> {
                let x = inputs[0];
                let dx = (0..x.len()).map(|i| $bwd(x.values[i], out.values[i], g[i])).collect();
                vec![dx]
            }
        }

        impl Tape {
            pub fn $method(&mut self, x: Value) -> Result<Value> {
                let tx = self.value(x);
                let values: Vec<f64> = tx.values.iter().map(|&v| $fwd(v)).collect();
                let t = Tensor { shape: tx.shape.clone(), values, grad: None };
                self.push_op(&[x], t, Box::new($struct))
            }
        }
    };
}

elementwise_unary!(exp, "exp", ExpOp, |x: f64| x.exp(), |_x, y: f64, g: f64| g * y);
elementwise_unary!(log, "log", LogOp, |x: f64| x.ln(), |x: f64, _y, g: f64| g / x);
elementwise_unary!(sqrt, "sqrt", SqrtOp, |x: f64| x.sqrt(), |_x, y: f64, g: f64| g / (2.0 * y));
// Subgradient at 0 is 0.
elementwise_unary!(relu, "relu", ReluOp, |x: f64| x.max(0.0), |x: f64, _y, g: f64| {
    if x > 0.0 {
        g
    } else {
        0.0
    }
});

macro_rules! scalar_op {
    ($method:ident, $opname:literal, $struct:ident, $fwd:expr, $bwd:expr) => {
        struct $struct(f64);

        impl TapeOp for $struct {
            fn name(&self) -> &'static str {
                $opname
            }
            fn backward(&self, _out: &Tensor, g: &[f64], inputs: &[&Tensor]) -> Vec<Vec<f64>> {
                let x = inputs[0];
                let dx = (0..x.len()).map(|i| $bwd(x.values[i], self.0, g[i])).collect();
                vec![dx]
            }
        }

        impl Tape {
            pub fn $method(&mut self, x: Value, c: f64) -> Result<Value> {
                let tx = self.value(x);
                let values: Vec<f64> = tx.values.iter().map(|&v| $fwd(v, c)).collect();
                let t = Tensor { shape: tx.shape.clone(), values, grad: None };
                self.push_op(&[x], t, Box::new($struct(c)))
            }
        }
    };
}

scalar_op!(add_scalar, "add_scalar", AddScalarOp, |x: f64, c: f64| x + c, |_x, _c, g: f64| g);
scalar_op!(mul_scalar, "mul_scalar", MulScalarOp, |x: f64, c: f64| x * c, |_x, c: f64, g: f64| {
    g * c
});
scalar_op!(max_scalar, "max_scalar", MaxScalarOp, |x: f64, c: f64| x.max(c), |x: f64,
                                                                              c: f64,
                                                                              g: f64| {
    if x > c {
        g
    } else {
        0.0
    }
});

struct MatmulOp;

impl TapeOp for MatmulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, _out: &Tensor, g: &[f64], inputs: &[&Tensor]) -> Vec<Vec<f64>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (n, k) = (a.shape[0], a.shape[1]);
        let m = b.shape[1];
        let mut da = vec![0.0; a.len()];
        let mut db = vec![0.0; b.len()];
        for i in 0..n {
            for p in 0..k {
                let mut acc = 0.0;
                for j in 0..m {
                    acc += g[i * m + j] * b.values[p * m + j];
                }
                da[i * k + p] = acc;
            }
        }
        for p in 0..k {
            for j in 0..m {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += a.values[i * k + p] * g[i * m + j];
                }
                db[p * m + j] = acc;
            }
        }
        vec![da, db]
    }
}

struct AddBiasOp;

impl TapeOp for AddBiasOp {
    fn name(&self) -> &'static str {
        "add_bias"
    }
    fn backward(&self, _out: &Tensor, g: &[f64], inputs: &[&Tensor]) -> Vec<Vec<f64>> {
        let b = inputs[1];
        let m = b.len();
        let mut db = vec![0.0; m];
        for row in g.chunks_exact(m) {
            for (j, &v) in row.iter().enumerate() {
                db[j] += v;
            }
        }
        vec![g.to_vec(), db]
    }
    // x keeps its gradient unchanged; bias sums over rows.
}

struct Conv2dOp;

impl TapeOp for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn backward(&self, _out: &Tensor, g: &[f64], inputs: &[&Tensor]) -> Vec<Vec<f64>> {
        let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
        let (n, cin, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let cout = w.shape[0];
        let mut dx = vec![0.0; x.len()];
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; b.len()];
        let xi = |ni: usize, c: usize, y: usize, xx: usize| ((ni * cin + c) * h + y) * wd + xx;
        let oi = |ni: usize, o: usize, y: usize, xx: usize| ((ni * cout + o) * h + y) * wd + xx;
        let wi = |o: usize, c: usize, ky: usize, kx: usize| ((o * cin + c) * 3 + ky) * 3 + kx;
        for ni in 0..n {
            for o in 0..cout {
                for y in 0..h {
                    for xx in 0..wd {
                        let go = g[oi(ni, o, y, xx)];
                        if go == 0.0 {
                            continue;
                        }
                        db[o] += go;
                        for c in 0..cin {
                            for ky in 0..3 {
                                let iy = y as isize + ky as isize - 1;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let ix = xx as isize + kx as isize - 1;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.values[xi(ni, c, iy as usize, ix as usize)];
                                    dw[wi(o, c, ky, kx)] += go * xv;
                                    dx[xi(ni, c, iy as usize, ix as usize)] +=
                                        go * w.values[wi(o, c, ky, kx)];
                                }
                            }
                        }
                    }
                }
            }
        }
        vec![dx, dw, db]
    }
}

struct AvgPool2dOp;

impl TapeOp for AvgPool2dOp {
    fn name(&self) -> &'static str {
        "avgpool2d"
    }
    fn backward(&self, out: &Tensor, g: &[f64], inputs: &[&Tensor]) -> Vec<Vec<f64>> {
        let x = inputs[0];
        let (n, c, oh, ow) = (out.shape[0], out.shape[1], out.shape[2], out.shape[3]);
        let (h, w) = (x.shape[2], x.shape[3]);
        let mut dx = vec![0.0; x.len()];
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let go = g[((ni * c + ci) * oh + y) * ow + xx] * 0.25;
                        for dy in 0..2 {
                            for dxx in 0..2 {
                                dx[((ni * c + ci) * h + 2 * y + dy) * w + 2 * xx + dxx] += go;
                            }
                        }
                    }
                }
            }
        }
        vec![dx]
    }
}

struct FlattenOp;

impl TapeOp for FlattenOp {
    fn name(&self) -> &'static str {
        "flatten"
    }
    fn backward(&self, _out: &Tensor, g: &[f64], _inputs: &[&Tensor]) -> Vec<Vec<f64>> {
        vec![g.to_vec()]
    }
}

struct ConcatRowsOp;

impl TapeOp for ConcatRowsOp {
    fn name(&self) -> &'static str {
        "concat_rows"
    }
    fn backward(&self, _out: &Tensor, g: &[f64], inputs: &[&Tensor]) -> Vec<Vec<f64>> {
        let na = inputs[0].len();
        vec![g[..na].to_vec(), g[na..].to_vec()]
    }
}

struct SliceRowsOp {
    start_row: usize,
}

impl TapeOp for SliceRowsOp {
    fn name(&self) -> &'static str {
        "slice_rows"
    }
    fn backward(&self, out: &Tensor, g: &[f64], inputs: &[&Tensor]) -> Vec<Vec<f64>> {
        let x = inputs[0];
        let cols = out.shape[1];
        let mut dx = vec![0.0; x.len()];
        let offset = self.start_row * cols;
        dx[offset..offset + g.len()].copy_from_slice(g);
        vec![dx]
    }
}

struct GatherEntriesOp {
    indices: Vec<usize>,
}

impl TapeOp for GatherEntriesOp {
    fn name(&self) -> &'static str {
        "gather_entries"
    }
    fn backward(&self, _out: &Tensor, g: &[f64], inputs: &[&Tensor]) -> Vec<Vec<f64>> {
        let mut dx = vec![0.0; inputs[0].len()];
        for (k, &i) in self.indices.iter().enumerate() {
            dx[i] += g[k];
        }
        vec![dx]
    }
}

struct ReduceSumOp;

impl TapeOp for ReduceSumOp {
    fn name(&self) -> &'static str {
        "reduce_sum"
    }
    fn backward(&self, _out: &Tensor, g: &[f64], inputs: &[&Tensor]) -> Vec<Vec<f64>> {
        vec![vec![g[0]; inputs[0].len()]]
    }
}

struct ReduceMeanOp;

impl TapeOp for ReduceMeanOp {
    fn name(&self) -> &'static str {
        "reduce_mean"
    }
    fn backward(&self, _out: &Tensor, g: &[f64], inputs: &[&Tensor]) -> Vec<Vec<f64>> {
        let n = inputs[0].len();
        vec![vec![g[0] / n as f64; n]]
    }
}

struct SoftmaxCrossEntropyOp {
    labels: Vec<usize>,
}

impl TapeOp for SoftmaxCrossEntropyOp {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }
    fn backward(&self, _out: &Tensor, g: &[f64], inputs: &[&Tensor]) -> Vec<Vec<f64>> {
        let logits = inputs[0];
        let (n, c) = (logits.shape[0], logits.shape[1]);
        let scale = g[0] / n as f64;
        let mut dl = vec![0.0; logits.len()];
        for i in 0..n {
            let row = &logits.values[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            for j in 0..c {
                let soft = (row[j] - max).exp() / denom;
                let target = if j == self.labels[i] { 1.0 } else { 0.0 };
                dl[i * c + j] = scale * (soft - target);
            }
        }
        vec![dl]
    }
}

impl Tape {
    /// `a (n x k) * b (k x m) -> (n x m)`.
    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(shape_err(
                "matmul",
                format!("incompatible shapes {:?} x {:?}", ta.shape, tb.shape),
            ));
        }
        let (n, k, m) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut values = vec![0.0; n * m];
        for i in 0..n {
            for p in 0..k {
                let av = ta.values[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &tb.values[p * m..(p + 1) * m];
                let orow = &mut values[i * m..(i + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                    *o += av * bv;
                }
            }
        }
        let t = Tensor { shape: vec![n, m], values, grad: None };
        self.push_op(&[a, b], t, Box::new(MatmulOp))
    }

    /// Adds a length-m bias vector to every row of an `n x m` matrix.
    pub fn add_bias(&mut self, x: Value, bias: Value) -> Result<Value> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.shape.len() != 2 || tb.shape.len() != 1 || tx.shape[1] != tb.shape[0] {
            return Err(shape_err(
                "add_bias",
                format!("incompatible shapes {:?} + {:?}", tx.shape, tb.shape),
            ));
        }
        let m = tb.shape[0];
        let values: Vec<f64> = tx
            .values
            .chunks_exact(m)
            .flat_map(|row| row.iter().zip(tb.values.iter()).map(|(&a, &b)| a + b))
            .collect();
        let t = Tensor { shape: tx.shape.clone(), values, grad: None };
        self.push_op(&[x, bias], t, Box::new(AddBiasOp))
    }

    /// 3x3 convolution, stride 1, zero padding 1.
    /// `x (n x cin x h x w)`, `w (cout x cin x 3 x 3)`, `b (cout)`.
    pub fn conv2d(&mut self, x: Value, weight: Value, bias: Value) -> Result<Value> {
        let (tx, tw, tb) = (self.value(x), self.value(weight), self.value(bias));
        if tx.shape.len() != 4 || tw.shape.len() != 4 {
            return Err(shape_err("conv2d", format!("need 4-d input, got {:?}", tx.shape)));
        }
        let (n, cin, h, w) = (tx.shape[0], tx.shape[1], tx.shape[2], tx.shape[3]);
        let cout = tw.shape[0];
        if tw.shape[1] != cin || tw.shape[2] != 3 || tw.shape[3] != 3 {
            return Err(shape_err(
                "conv2d",
                format!("kernel {:?} does not match input channels {cin}", tw.shape),
            ));
        }
        if tb.shape != vec![cout] {
            return Err(shape_err("conv2d", format!("bias {:?} != [{cout}]", tb.shape)));
        }
        let mut values = vec![0.0; n * cout * h * w];
        for ni in 0..n {
            for o in 0..cout {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = tb.values[o];
                        for c in 0..cin {
                            for ky in 0..3usize {
                                let iy = y as isize + ky as isize - 1;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = (ni * cin + c) * h + iy as usize;
                                let wrow = ((o * cin + c) * 3 + ky) * 3;
                                for kx in 0..3usize {
                                    let ix = xx as isize + kx as isize - 1;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += tx.values[xrow * w + ix as usize]
                                        * tw.values[wrow + kx];
                                }
                            }
                        }
                        values[((ni * cout + o) * h + y) * w + xx] = acc;
                    }
                }
            }
        }
        let t = Tensor { shape: vec![n, cout, h, w], values, grad: None };
        self.push_op(&[x, weight, bias], t, Box::new(Conv2dOp))
    }

    /// 2x2 average pooling with stride 2; spatial dims must be even.
    pub fn avgpool2d(&mut self, x: Value) -> Result<Value> {
        let tx = self.value(x);
        if tx.shape.len() != 4 {
            return Err(shape_err("avgpool2d", format!("need 4-d input, got {:?}", tx.shape)));
        }
        let (n, c, h, w) = (tx.shape[0], tx.shape[1], tx.shape[2], tx.shape[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err("avgpool2d", format!("spatial dims {h}x{w} must be even")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut values = vec![0.0; n * c * oh * ow];
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = 0.0;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                acc += tx.values
                                    [((ni * c + ci) * h + 2 * y + dy) * w + 2 * xx + dx];
                            }
                        }
                        values[((ni * c + ci) * oh + y) * ow + xx] = acc * 0.25;
                    }
                }
            }
        }
        let t = Tensor { shape: vec![n, c, oh, ow], values, grad: None };
        self.push_op(&[x], t, Box::new(AvgPool2dOp))
    }

    /// Collapses all trailing dimensions: `(n x ...) -> (n x rest)`.
    pub fn flatten(&mut self, x: Value) -> Result<Value> {
        let tx = self.value(x);
        if tx.shape.is_empty() {
            return Err(shape_err("flatten", "scalar input".to_string()));
        }
        let n = tx.shape[0];
        let rest: usize = tx.shape[1..].iter().product();
        let t = Tensor { shape: vec![n, rest], values: tx.values.clone(), grad: None };
        self.push_op(&[x], t, Box::new(FlattenOp))
    }

    /// Stacks two matrices with equal column counts along rows.
    pub fn concat_rows(&mut self, a: Value, b: Value) -> Result<Value> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[1] {
            return Err(shape_err(
                "concat_rows",
                format!("incompatible shapes {:?} and {:?}", ta.shape, tb.shape),
            ));
        }
        let mut values = ta.values.clone();
        values.extend_from_slice(&tb.values);
        let t = Tensor { shape: vec![ta.shape[0] + tb.shape[0], ta.shape[1]], values, grad: None };
        self.push_op(&[a, b], t, Box::new(ConcatRowsOp))
    }

    /// Contiguous row range of a matrix.
    pub fn slice_rows(&mut self, x: Value, start_row: usize, rows: usize) -> Result<Value> {
        let tx = self.value(x);
        if tx.shape.len() != 2 || start_row + rows > tx.shape[0] {
            return Err(shape_err(
                "slice_rows",
                format!("rows {start_row}..{} out of {:?}", start_row + rows, tx.shape),
            ));
        }
        let cols = tx.shape[1];
        let values = tx.values[start_row * cols..(start_row + rows) * cols].to_vec();
        let t = Tensor { shape: vec![rows, cols], values, grad: None };
        self.push_op(&[x], t, Box::new(SliceRowsOp { start_row }))
    }

    /// Gathers flat-indexed entries into a vector.
    pub fn gather_entries(&mut self, x: Value, indices: &[usize]) -> Result<Value> {
        let tx = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= tx.len()) {
            return Err(shape_err(
                "gather_entries",
                format!("index {bad} out of {} values", tx.len()),
            ));
        }
        let values: Vec<f64> = indices.iter().map(|&i| tx.values[i]).collect();
        let t = Tensor { shape: vec![indices.len()], values, grad: None };
        self.push_op(&[x], t, Box::new(GatherEntriesOp { indices: indices.to_vec() }))
    }

    /// Sum of all entries, as a scalar.
    pub fn reduce_sum(&mut self, x: Value) -> Result<Value> {
        let total: f64 = self.value(x).values.iter().sum();
        self.push_op(&[x], Tensor::scalar(total), Box::new(ReduceSumOp))
    }

    /// Mean of all entries, as a scalar.
    pub fn reduce_mean(&mut self, x: Value) -> Result<Value> {
        let tx = self.value(x);
        if tx.is_empty() {
            return Err(shape_err("reduce_mean", "empty input".to_string()));
        }
        let mean: f64 = tx.values.iter().sum::<f64>() / tx.len() as f64;
        self.push_op(&[x], Tensor::scalar(mean), Box::new(ReduceMeanOp))
    }

    /// Mean softmax cross-entropy of `logits (n x c)` against integer
    /// labels, computed via log-sum-exp.
    pub fn softmax_cross_entropy(&mut self, logits: Value, labels: &[usize]) -> Result<Value> {
        let tl = self.value(logits);
        if tl.shape.len() != 2 || tl.shape[0] != labels.len() {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("{} labels for logits {:?}", labels.len(), tl.shape),
            ));
        }
        let (n, c) = (tl.shape[0], tl.shape[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {c} classes"),
            ));
        }
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &tl.values[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[y];
        }
        let t = Tensor::scalar(total / n as f64);
        self.push_op(&[logits], t, Box::new(SoftmaxCrossEntropyOp { labels: labels.to_vec() }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: Vec<usize>, values: Vec<f64>) -> Value {
        tape.leaf(Tensor::new(shape, values).unwrap())
    }

    #[test]
    fn relu_forward_and_backward_at_sample_points() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3], vec![-1.0, 0.0, 2.0]);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).values, vec![0.0, 0.0, 2.0]);
        let s = tape.reduce_sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn conv2d_identity_kernel_is_identity_map() {
        let mut tape = Tape::new();
        let img: Vec<f64> = (0..16).map(|i| i as f64 / 16.0).collect();
        let x = leaf(&mut tape, vec![1, 1, 4, 4], img.clone());
        let mut kernel = vec![0.0; 9];
        kernel[4] = 1.0; // center tap
        let w = leaf(&mut tape, vec![1, 1, 3, 3], kernel);
        let b = leaf(&mut tape, vec![1], vec![0.0]);
        let y = tape.conv2d(x, w, b).unwrap();
        assert_eq!(tape.value(y).values, img);
    }

    #[test]
    fn matmul_known_product() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut tape, vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).values, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn softmax_cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let logits = leaf(&mut tape, vec![2, 4], vec![0.0; 8]);
        let l = tape.softmax_cross_entropy(logits, &[1, 3]).unwrap();
        assert!((tape.value(l).item() - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_cross_entropy_rejects_out_of_range_label() {
        let mut tape = Tape::new();
        let logits = leaf(&mut tape, vec![1, 2], vec![0.0; 2]);
        assert!(tape.softmax_cross_entropy(logits, &[2]).is_err());
    }

    #[test]
    fn avgpool_and_flatten_shapes() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 2, 4, 4], (0..32).map(|i| i as f64).collect());
        let p = tape.avgpool2d(x).unwrap();
        assert_eq!(tape.value(p).shape, vec![1, 2, 2, 2]);
        let f = tape.flatten(p).unwrap();
        assert_eq!(tape.value(f).shape, vec![1, 8]);
        // First pooled cell averages 0, 1, 4, 5.
        assert_eq!(tape.value(f).values[0], 2.5);
    }

    #[test]
    fn concat_then_slice_round_trips() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![1, 2], vec![1.0, 2.0]);
        let b = leaf(&mut tape, vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        let c = tape.concat_rows(a, b).unwrap();
        assert_eq!(tape.value(c).shape, vec![3, 2]);
        let s = tape.slice_rows(c, 1, 2).unwrap();
        assert_eq!(tape.value(s).values, vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 2], vec![0.0; 4]);
        let b = leaf(&mut tape, vec![3, 2], vec![0.0; 6]);
        assert!(tape.add(a, b).is_err());
        assert!(tape.matmul(b, b).is_err());
        let bias = leaf(&mut tape, vec![3], vec![0.0; 3]);
        assert!(tape.add_bias(a, bias).is_err());
        assert!(tape.slice_rows(a, 1, 2).is_err());
    }
}
