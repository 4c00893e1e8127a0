use super::{dispatch, Element, Tensor};
use crate::error::{Error, Result};

fn validate(order: &[usize], rank: usize) -> Result<()> {
    if order.len() != rank {
        return Err(Error::Argument(format!(
            "permutation {order:?} has length {}, tensor rank is {rank}",
            order.len()
        )));
    }
    let mut seen = vec![false; rank];
    for &ax in order {
        if ax >= rank || seen[ax] {
            return Err(Error::Argument(format!(
                "{order:?} is not a permutation of 0..{rank}"
            )));
        }
        seen[ax] = true;
    }
    Ok(())
}

/// Returns `q` with `q[order[i]] = i`, so that permuting by `order` then by
/// `q` is the identity.
pub fn invert_permutation(order: &[usize]) -> Result<Vec<usize>> {
    validate(order, order.len())?;
    let mut inv = vec![0; order.len()];
    for (i, &ax) in order.iter().enumerate() {
        inv[ax] = i;
    }
    Ok(inv)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data<T: Element>(src: &[T], shape: &[usize], order: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = order.iter().map(|&a| shape[a]).collect();
    // stride in the source buffer for each output axis
    let walk: Vec<usize> = order.iter().map(|&a| src_strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += walk[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= walk[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

pub(super) fn permute_axes(x: &Tensor, order: &[usize]) -> Result<Tensor> {
    validate(order, x.rank())?;
    let out_shape: Vec<usize> = order.iter().map(|&a| x.shape()[a]).collect();
    Ok(dispatch!(x, |s: T| Tensor::from_parts(
        &out_shape,
        permute_data(s, x.shape(), order)
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;
    use proptest::prelude::*;

    /// Index-map oracle: computes each output element from its multi-index.
    fn oracle(x: &Tensor, order: &[usize]) -> Vec<f64> {
        let shape = x.shape();
        let out_shape: Vec<usize> = order.iter().map(|&a| shape[a]).collect();
        let st = strides(shape);
        let n: usize = shape.iter().product();
        let data = x.to_f64_vec();
        (0..n)
            .map(|flat| {
                let mut rem = flat;
                let mut out_idx = vec![0; shape.len()];
                for ax in (0..shape.len()).rev() {
                    out_idx[ax] = rem % out_shape[ax];
                    rem /= out_shape[ax];
                }
                let src: usize = order
                    .iter()
                    .zip(&out_idx)
                    .map(|(&a, &i)| i * st[a])
                    .sum();
                data[src]
            })
            .collect()
    }

    #[test]
    fn conv_reordering_shape() {
        let x = Tensor::zeros(&[8, 4, 3, 3], DType::F32).unwrap();
        let y = x.permute_axes(&[0, 2, 3, 1]).unwrap();
        assert_eq!(y.shape(), &[8, 3, 3, 4]);
    }

    #[test]
    fn identity_is_bitwise_copy() {
        let x = Tensor::from_fn(&[2, 3, 4], DType::F32, |i| i as f64 * 0.37 - 1.0).unwrap();
        assert!(x.permute_axes(&[0, 1, 2]).unwrap().bitwise_eq(&x));
    }

    #[test]
    fn rejects_invalid_permutations() {
        let x = Tensor::zeros(&[2, 3], DType::F32).unwrap();
        assert!(matches!(x.permute_axes(&[0, 0]), Err(Error::Argument(_))));
        assert!(matches!(x.permute_axes(&[0]), Err(Error::Argument(_))));
        assert!(matches!(x.permute_axes(&[0, 2]), Err(Error::Argument(_))));
    }

    fn shape_and_order() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        prop::collection::vec(1usize..5, 1..5).prop_flat_map(|shape| {
            let rank = shape.len();
            (
                Just(shape),
                Just((0..rank).collect::<Vec<_>>()).prop_shuffle(),
            )
        })
    }

    proptest! {
        #[test]
        fn matches_index_oracle_and_round_trips((shape, order) in shape_and_order(), seed in 0u64..1000) {
            let x = Tensor::from_fn(&shape, DType::F64, |i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 7.0).unwrap();
            let y = x.permute_axes(&order).unwrap();
            prop_assert_eq!(y.to_f64_vec(), oracle(&x, &order));
            let back = y.permute_axes(&invert_permutation(&order).unwrap()).unwrap();
            prop_assert!(back.bitwise_eq(&x));
        }
    }
}
