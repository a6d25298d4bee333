use crate::error::{Error, Result};
use crate::tensor::{numel, strides};

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::dim(
                    op,
                    format!("shapes {:?} and {:?} are not broadcastable", a, b),
                ))
            }
        };
    }
    Ok(out)
}

/// For every flat index of `out_shape`, the flat index of `src_shape` it
/// reads from under broadcasting.
pub fn broadcast_map(src_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let n = numel(out_shape);
    if src_shape == out_shape {
        return (0..n).collect();
    }
    let rank = out_shape.len();
    let src_strides = strides(src_shape);
    // effective stride per output axis; zero where broadcast
    let walk: Vec<usize> = (0..rank)
        .map(|i| {
            let lead = rank - src_shape.len();
            if i < lead || src_shape[i - lead] == 1 {
                0
            } else {
                src_strides[i - lead]
            }
        })
        .collect();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let mut map = Vec::with_capacity(n);
    for _ in 0..n {
        map.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += walk[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= walk[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcasts_trailing_axes() {
        assert_eq!(broadcast_shapes("t", &[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shapes("t", &[4, 1, 3], &[2, 1]).unwrap(), vec![4, 2, 3]);
        assert!(broadcast_shapes("t", &[2, 3], &[2]).is_err());
    }

    #[test]
    fn map_repeats_rows() {
        assert_eq!(broadcast_map(&[3], &[2, 3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(broadcast_map(&[2, 1], &[2, 3]), vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(broadcast_map(&[], &[2]), vec![0, 0]);
    }
}
