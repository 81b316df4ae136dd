//! Manifest entries decoded into pixels and network-resolution samples.

use super::image_io::{read_image, Image};
use super::manifest::{Entry, Manifest};
use crate::error::{Error, Result};
use crate::network::Model;
use crate::pipeline::Sample;
use crate::tensor::{Element, Tensor};

/// One decoded manifest entry at its original resolution.
#[derive(Clone, Debug)]
pub struct Item {
    pub name: String,
    /// RGB.
    pub image: Image,
    /// Binarized ground truth, row-major over the image grid.
    pub gt: Vec<bool>,
    pub mask: Option<Vec<bool>>,
}

impl Item {
    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }
}

pub fn load_item(entry: &Entry) -> Result<Item> {
    let image = read_image(&entry.image)?.to_rgb();
    let gt_img = read_image(&entry.gt)?;
    let dims = (image.width, image.height);
    let mismatch = |what: &str, w: usize, h: usize| Error::Image {
        path: entry.image.clone(),
        msg: format!("{what} is {w}×{h}, image is {}×{}", dims.0, dims.1),
    };
    if (gt_img.width, gt_img.height) != dims {
        return Err(mismatch("ground truth", gt_img.width, gt_img.height));
    }
    let mask = match &entry.mask {
        Some(p) => {
            let m = read_image(p)?;
            if (m.width, m.height) != dims {
                return Err(mismatch("difference mask", m.width, m.height));
            }
            Some(m.to_binary())
        }
        None => None,
    };
    Ok(Item {
        name: entry.stem(),
        image,
        gt: gt_img.to_binary(),
        mask,
    })
}

pub fn load_items(manifest: &Manifest) -> Result<Vec<Item>> {
    manifest.entries.iter().map(load_item).collect()
}

/// `1×3×size×size` network input.
pub fn network_input<T: Element>(image: &Image, size: usize) -> Result<Tensor<T>> {
    image.to_rgb().to_tensor::<T>().resize_bilinear(size, size)
}

fn bool_tensor<T: Element>(mask: &[bool], w: usize, h: usize) -> Tensor<T> {
    Tensor::from_fn(&[1, 1, h, w], |i| if mask[i] { T::one() } else { T::zero() })
}

/// Nearest-neighbour resampling of a binary grid (pixel centers).
pub fn resize_mask(mask: &[bool], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<bool> {
    if (w, h) == (out_w, out_h) {
        return mask.to_vec();
    }
    let pick = |o: usize, n: usize, out: usize| (((o as f64 + 0.5) * n as f64 / out as f64) as usize).min(n - 1);
    (0..out_w * out_h)
        .map(|i| mask[pick(i / out_w, h, out_h) * w + pick(i % out_w, w, out_w)])
        .collect()
}

/// The item resized to the network's training resolution. The ground
/// truth is resampled bilinearly and re-binarized at 0.5.
pub fn to_sample<T: Element>(item: &Item, size: usize) -> Result<Sample<T>> {
    let (w, h) = (item.width(), item.height());
    let gt = bool_tensor::<T>(&item.gt, w, h)
        .resize_bilinear(size, size)?
        .map(|v| if v.to_f64_lossy() >= 0.5 { T::one() } else { T::zero() });
    Ok(Sample {
        name: item.name.clone(),
        image: network_input(&item.image, size)?,
        gt,
        mask: item.mask.as_ref().map(|m| resize_mask(m, w, h, size, size)),
    })
}

/// Eval-mode saliency probabilities of layer 1, upsampled to the item's
/// original size: `1×1×H×W`.
pub fn predict_map<T: Element>(model: &Model<T>, image: &Image, size: usize) -> Result<Tensor<T>> {
    let probs = model.predict(&network_input(image, size)?)?;
    let first = probs
        .into_iter()
        .next()
        .ok_or_else(|| Error::InvalidConfig("network has no outputs".into()))?;
    first.resize_bilinear(image.height, image.width)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_mask_resize() {
        let m = vec![true, false, false, true];
        let up = resize_mask(&m, 2, 2, 4, 4);
        assert_eq!(up.iter().filter(|&&b| b).count(), 8);
        assert!(up[0] && up[5] && !up[2] && up[15]);
        assert_eq!(resize_mask(&up, 4, 4, 2, 2), m);
    }
}
