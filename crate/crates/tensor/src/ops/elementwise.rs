use crate::error::Result;
use crate::kernels::{broadcast_index, broadcast_shape};
use crate::tape::{Op, Tape, Var};

impl Tape {
    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (da, db) = (self.data(a), self.data(b));
        if sa == sb {
            let data = da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect();
            return self.push(name, sa, data, op);
        }
        let shape = broadcast_shape(&sa, &sb).map_err(|e| match e {
            crate::TensorError::Shape { detail, .. } => crate::TensorError::Shape { op: name, detail },
            other => other,
        })?;
        let ia = broadcast_index(&sa, &shape);
        let ib = broadcast_index(&sb, &shape);
        let data = ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect();
        self.push(name, shape, data, op)
    }

    /// Elementwise `a + b` with NumPy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Alias of [`Tape::add`] for call sites that rely on broadcasting.
    pub fn broadcast_add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add(a, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let data = self.data(x).iter().map(|v| v * c).collect();
        self.push("scale", shape, data, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let data = self.data(x).iter().map(|v| v + c).collect();
        self.push("add_scalar", shape, data, Op::Offset(x))
    }
}
