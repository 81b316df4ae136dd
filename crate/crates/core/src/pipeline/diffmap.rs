use crate::error::{Error, Result};
use crate::network::Model;
use crate::tensor::{Element, Tensor};

/// Saliency maps are binarized at this value before comparison.
pub const BINARIZE_AT: f64 = 0.5;

/// Pixels of the `h×w` grid where the shallowest and deepest maps disagree
/// after both are upsampled and binarized. Each map is `1×1×h'×w'`.
pub fn difference_mask<T: Element>(fine: &Tensor<T>, coarse: &Tensor<T>, h: usize, w: usize) -> Result<Vec<bool>> {
    for m in [fine, coarse] {
        match m.shape() {
            [1, 1, _, _] => {}
            s => return Err(Error::shape("difference_mask", format!("expected 1×1×H×W map, got {s:?}"))),
        }
    }
    let a = fine.resize_bilinear(h, w)?;
    let b = coarse.resize_bilinear(h, w)?;
    let t = T::from_f64_lossy(BINARIZE_AT);
    Ok(a.data().iter().zip(b.data()).map(|(&x, &y)| (x >= t) != (y >= t)).collect())
}

/// Difference masks for each `(image, (h, w))`, where `image` is the
/// `1×3×S×S` network input and `h×w` the original ground-truth size.
pub fn generate_difference_maps<T: Element>(
    model: &Model<T>,
    inputs: &[(&Tensor<T>, (usize, usize))],
) -> Result<Vec<Vec<bool>>> {
    inputs
        .iter()
        .map(|&(image, (h, w))| {
            let probs = model.predict(image)?;
            let (Some(fine), Some(coarse)) = (probs.first(), probs.last()) else {
                return Err(Error::InvalidConfig("network has no outputs".into()));
            };
            difference_mask(fine, coarse, h, w)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[1, 1, 2, 2], v).unwrap()
    }

    #[test]
    fn pixel_comparison() {
        let s1 = map(&[0.9, 0.1, 0.8, 0.2]);
        let s5 = map(&[0.7, 0.6, 0.3, 0.0]);
        assert_eq!(difference_mask(&s1, &s5, 2, 2).unwrap(), vec![false, true, true, false]);
        assert_eq!(difference_mask(&s1, &s1, 2, 2).unwrap(), vec![false; 4]);
        let inv = s1.map(|v| 1.0 - v);
        assert_eq!(difference_mask(&s1, &inv, 2, 2).unwrap(), vec![true; 4]);
    }

    #[test]
    fn coarse_map_is_upsampled() {
        let fine = Tensor::from_fn(&[1, 1, 4, 4], |i| if i % 4 < 2 { 0.9 } else { 0.1 });
        let coarse = Tensor::from_f64(&[1, 1, 1, 1], &[0.8]).unwrap();
        let m = difference_mask(&fine, &coarse, 4, 4).unwrap();
        assert_eq!(m.iter().filter(|&&b| b).count(), 8);
        assert!(difference_mask(&fine, &Tensor::zeros(&[1, 2, 1, 1]), 4, 4).is_err());
    }
}
