use crate::error::Result;
use crate::kernels::ConvGeom;
use crate::tape::{Op, Tape, Var};

impl Tape {
    /// Single-sample 3D cross-correlation.
    ///
    /// `input: [C_in, h, w, d]`, `kernel: [C_out, C_in, k1, k2, k3]`; each output
    /// extent is `floor((h + 2·pad − k)/stride) + 1`.
    pub fn conv3d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::forward("conv3d", self.shape(input), self.shape(kernel), stride, pad)?;
        let out = geom.conv(self.data(input), self.data(kernel));
        let shape = geom.out_shape();
        self.push("conv3d", shape, out, Op::Conv3d { x: input, k: kernel, geom })
    }

    /// Adjoint of [`Tape::conv3d`] (zero padding).
    ///
    /// `input: [C_in, h, w, d]`, `kernel: [C_in, C_out, k1, k2, k3]`; output
    /// extents are `(h − 1)·stride + k`.
    pub fn conv3d_transpose(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var> {
        let geom = ConvGeom::transpose(self.shape(input), self.shape(kernel), stride)?;
        let out = geom.conv_adjoint(self.data(input), self.data(kernel));
        let shape = geom.in_shape();
        self.push("conv3d_transpose", shape, out, Op::ConvTranspose3d { x: input, k: kernel, geom })
    }
}
