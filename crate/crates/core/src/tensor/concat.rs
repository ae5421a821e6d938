use super::{Scalar, Tensor};
use crate::error::{shape_err, Result};

/// Stacks `b`'s channels after `a`'s.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (na, ca, ha, wa) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(shape_err!(
            "cannot concatenate {:?} and {:?} along channels",
            a.shape(),
            b.shape()
        ));
    }
    let (la, lb) = (ca * ha * wa, cb * hb * wb);
    let mut data = Vec::with_capacity(a.len() + b.len());
    for n in 0..na {
        data.extend_from_slice(&a.data()[n * la..(n + 1) * la]);
        data.extend_from_slice(&b.data()[n * lb..(n + 1) * lb]);
    }
    Ok(Tensor::from_parts(vec![na, ca + cb, ha, wa], data))
}

/// Inverse of [`concat_channels`]: the first `channels` channels, then the rest.
pub fn split_channels<T: Scalar>(t: &Tensor<T>, channels: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = t.dims4()?;
    if channels > c {
        return Err(shape_err!(
            "cannot split {channels} channels off {:?}",
            t.shape()
        ));
    }
    let plane = h * w;
    let mut a = Vec::with_capacity(n * channels * plane);
    let mut b = Vec::with_capacity(n * (c - channels) * plane);
    for item in 0..n {
        let base = item * c * plane;
        a.extend_from_slice(&t.data()[base..base + channels * plane]);
        b.extend_from_slice(&t.data()[base + channels * plane..base + c * plane]);
    }
    Ok((
        Tensor::from_parts(vec![n, channels, h, w], a),
        Tensor::from_parts(vec![n, c - channels, h, w], b),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn channel_arithmetic() {
        let a = Tensor::<f64>::zeros(&[1, 2, 8, 8]).unwrap();
        let b = Tensor::<f64>::zeros(&[1, 3, 8, 8]).unwrap();
        assert_eq!(concat_channels(&a, &b).unwrap().shape(), &[1, 5, 8, 8]);
    }

    #[test]
    fn empty_channels_are_neutral() {
        let x = Tensor::<f64>::from_fn(&[2, 2, 3, 3], |i| i as f64).unwrap();
        let empty = Tensor::<f64>::zeros(&[2, 0, 3, 3]).unwrap();
        assert_eq!(concat_channels(&x, &empty).unwrap(), x);
    }

    #[test]
    fn spatial_mismatch_is_rejected() {
        let a = Tensor::<f64>::zeros(&[1, 2, 8, 8]).unwrap();
        let b = Tensor::<f64>::zeros(&[1, 2, 4, 8]).unwrap();
        assert!(concat_channels(&a, &b).is_err());
    }

    proptest! {
        #[test]
        fn split_inverts_concat(n in 1usize..3, ca in 0usize..4, cb in 0usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
            let gen = |c: usize, salt: u64| Tensor::<f64>::from_fn(&[n, c, h, w], |i| {
                ((i as u64).wrapping_mul(6364136223846793005).wrapping_add(seed ^ salt) >> 11) as f64
            }).unwrap();
            let a = gen(ca, 1);
            let b = gen(cb, 2);
            let joined = concat_channels(&a, &b).unwrap();
            let (a2, b2) = split_channels(&joined, ca).unwrap();
            prop_assert_eq!(a2, a);
            prop_assert_eq!(b2, b);
        }
    }
}
