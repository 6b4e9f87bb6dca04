use super::{Graph, Var};
use crate::error::{MsgcaError, Result};

/// A row block consumed through linear maps. `Affine` holds `x W + b`
/// without forming it: projecting composes `W` with the map first, which
/// is much cheaper when `x` is narrow.
#[derive(Clone, Copy, Debug)]
pub enum Rows {
    Dense(Var),
    Affine { x: Var, w: Var, b: Var },
}

impl From<Var> for Rows {
    fn from(v: Var) -> Rows {
        Rows::Dense(v)
    }
}

impl Rows {
    pub fn shape(self, g: &Graph) -> (usize, usize) {
        match self {
            Rows::Dense(v) => g.shape(v),
            Rows::Affine { x, w, .. } => (g.shape(x).0, g.shape(w).1),
        }
    }

    /// `self * m`.
    pub fn project(self, g: &mut Graph, m: Var) -> Result<Var> {
        match self {
            Rows::Dense(v) => g.matmul(v, m),
            Rows::Affine { x, w, b } => {
                let wm = g.matmul(w, m)?;
                let bm = g.matmul(b, m)?;
                let z = g.matmul(x, wm)?;
                g.add(z, bm)
            }
        }
    }

    pub fn materialize(self, g: &mut Graph) -> Result<Var> {
        match self {
            Rows::Dense(v) => Ok(v),
            Rows::Affine { x, w, b } => {
                let z = g.matmul(x, w)?;
                g.add(z, b)
            }
        }
    }

    /// Restricts an affine block to the given rows of `x`.
    pub fn gather(self, g: &mut Graph, index: std::rc::Rc<[usize]>) -> Result<Rows> {
        Ok(match self {
            Rows::Dense(v) => Rows::Dense(g.gather_rows(v, index)?),
            Rows::Affine { x, w, b } => Rows::Affine {
                x: g.gather_rows(x, index)?,
                w,
                b,
            },
        })
    }

    pub(crate) fn check_bias(self, g: &Graph) -> Result<()> {
        if let Rows::Affine { x, w, b } = self {
            let (sx, sw, sb) = (g.shape(x), g.shape(w), g.shape(b));
            if sx.1 != sw.0 || sb != (1, sw.1) {
                return Err(MsgcaError::Shape(format!(
                    "affine rows: x {}x{}, w {}x{}, b {}x{}",
                    sx.0, sx.1, sw.0, sw.1, sb.0, sb.1
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn projection_matches_materialized_product() {
        let mut g = Graph::new();
        let x = g.constant(array![[1.0, -2.0, 0.5], [0.3, 0.0, 4.0]]);
        let w = g.constant(array![[0.2, 1.0], [-0.5, 0.1], [0.7, -0.3]]);
        let b = g.constant(array![[0.05, -0.4]]);
        let m = g.constant(array![[1.5, 0.0, -1.0], [0.25, 2.0, 0.5]]);
        let rows = Rows::Affine { x, w, b };
        rows.check_bias(&g).unwrap();
        assert_eq!(rows.shape(&g), (2, 2));
        let fast = rows.project(&mut g, m).unwrap();
        let dense = rows.materialize(&mut g).unwrap();
        let slow = g.matmul(dense, m).unwrap();
        for (a, c) in g.value(fast).iter().zip(g.value(slow).iter()) {
            assert!((a - c).abs() < 1e-12);
        }
        let sub = rows.gather(&mut g, vec![1].into()).unwrap();
        let sub = sub.materialize(&mut g).unwrap();
        assert_eq!(g.value(sub).row(0), g.value(dense).row(1));
    }
}
