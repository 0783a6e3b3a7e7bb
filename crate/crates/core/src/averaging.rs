//! Block averaging `Q`, its transpose, and compositions `Q_j`.
//!
//! A block of the `j`-fold averaging is the cube of `L^j` sites per side
//! centred on fine site `L^j y`; membership is pure integer arithmetic.

use nalgebra::DMatrix;

use crate::lattice::{scale_field, Field, ScaleDirection, TorusLattice};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct BlockMap {
    pub fine: TorusLattice,
    pub coarse: TorusLattice,
    pub j: u32,
    block_of: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl BlockMap {
    pub fn new(fine: TorusLattice, j: u32) -> Result<Self> {
        let coarse = fine.coarsened(j)?;
        let side = fine.l.pow(j);
        let half = (side - 1) / 2;
        let nc = coarse.sites_per_side();
        let mut block_of = vec![0; fine.n_sites()];
        let mut members = vec![Vec::with_capacity(side.pow(fine.d as u32)); coarse.n_sites()];
        for (x, slot) in block_of.iter_mut().enumerate() {
            let c = fine.coords(x);
            let mut yc = [0usize; 3];
            for mu in 0..fine.d {
                yc[mu] = ((c[mu] + half) / side) % nc;
            }
            let y = coarse.index(&yc);
            *slot = y;
            members[y].push(x);
        }
        Ok(BlockMap { fine, coarse, j, block_of, members })
    }

    pub fn block_of(&self, x: usize) -> usize {
        self.block_of[x]
    }

    pub fn members(&self, y: usize) -> &[usize] {
        &self.members[y]
    }

    pub fn block_size(&self) -> usize {
        self.fine.l.pow(self.j * self.fine.d as u32)
    }

    /// `(Qf)(y) = L^{-jd} Σ_{x∈B(y)} f(x)`.
    pub fn apply_q(&self, f: &Field) -> Result<Field> {
        self.fine.check_same(&f.lattice)?;
        let inv = 1.0 / self.block_size() as f64;
        Ok(Field::from_fn(self.coarse, |y| inv * self.members[y].iter().map(|&x| f.values[x]).sum::<f64>()))
    }

    /// Piecewise-constant extension, the transpose of `Q` for the weighted
    /// inner products.
    pub fn apply_qt(&self, g: &Field) -> Result<Field> {
        self.coarse.check_same(&g.lattice)?;
        Ok(Field::from_fn(self.fine, |x| g.values[self.block_of[x]]))
    }

    /// Matrix of `Q`, coarse rows by fine columns.
    pub fn q_matrix(&self) -> DMatrix<f64> {
        let inv = 1.0 / self.block_size() as f64;
        let mut m = DMatrix::zeros(self.coarse.n_sites(), self.fine.n_sites());
        for (x, &y) in self.block_of.iter().enumerate() {
            m[(y, x)] = inv;
        }
        m
    }

    /// Matrix of `Qᵀ`, fine rows by coarse columns (entries 0 or 1).
    pub fn qt_matrix(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.fine.n_sites(), self.coarse.n_sites());
        for (x, &y) in self.block_of.iter().enumerate() {
            m[(x, y)] = 1.0;
        }
        m
    }

    /// Matrix of the projection `QᵀQ` on fine fields.
    pub fn projection_matrix(&self) -> DMatrix<f64> {
        let n = self.fine.n_sites();
        let inv = 1.0 / self.block_size() as f64;
        let mut m = DMatrix::zeros(n, n);
        for block in &self.members {
            for &x in block {
                for &x2 in block {
                    m[(x, x2)] = inv;
                }
            }
        }
        m
    }

    /// `Q_{j1+j2} = Q_{j2} ∘ Q_{j1}`.
    pub fn compose(&self, next: &BlockMap) -> Result<BlockMap> {
        if next.fine != self.coarse {
            return Err(Error::LatticeMismatch(format!(
                "cannot chain averaging onto {:?} with one from {:?}",
                self.coarse, next.fine
            )));
        }
        BlockMap::new(self.fine, self.j + next.j)
    }

    /// Largest pointwise gap between `Q(f_L)` and `(Qf)_L`.
    pub fn scale_commutation_defect(&self, f: &Field) -> Result<f64> {
        let scaled_map = BlockMap::new(self.fine.scaled_up(), self.j)?;
        let lhs = scaled_map.apply_q(&scale_field(f, ScaleDirection::Up))?;
        let rhs = scale_field(&self.apply_q(f)?, ScaleDirection::Up);
        rhs.lattice.check_same(&lhs.lattice)?;
        Ok(lhs.values.iter().zip(&rhs.values).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }
}
