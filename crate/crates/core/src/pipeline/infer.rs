use std::path::Path;

use super::io::Image;
use super::model::Model;
use crate::error::{Error, Result};
use crate::refine::PseudoMask;

pub const OVERLAY_ALPHA: f64 = 0.5;

/// Overlay colours for classes 1..=8; background is left untouched.
pub const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [145, 30, 180],
    [70, 240, 240],
    [245, 130, 48],
    [240, 50, 230],
];

#[derive(Debug, Clone, PartialEq)]
pub struct InferOutput {
    /// Class per pixel at image resolution.
    pub mask: PseudoMask,
    pub overlay: Image,
    /// Mean channel uncertainty scaled to 0..=255, when the model masks.
    pub uncertainty: Option<Image>,
}

pub fn overlay(image: &Image, mask: &PseudoMask) -> Result<Image> {
    if image.channels != 3 || (image.height, image.width) != (mask.height, mask.width) {
        return Err(Error::shape(
            "overlay",
            &[image.height, image.width, image.channels],
            &[mask.height, mask.width, 3],
        ));
    }
    let mut data = image.data.clone();
    for (px, &label) in data.chunks_mut(3).zip(&mask.labels) {
        if label == 0 || label as usize > PALETTE.len() {
            continue;
        }
        let colour = PALETTE[label as usize - 1];
        for (v, c) in px.iter_mut().zip(colour) {
            *v = ((1.0 - OVERLAY_ALPHA) * *v as f64 + OVERLAY_ALPHA * c as f64).round() as u8;
        }
    }
    Image::new(image.width, image.height, 3, data)
}

pub fn infer(model: &Model, image: &Image) -> Result<InferOutput> {
    let size = model.cfg.encoder.image_size;
    if (image.width, image.height) != (size, size) || image.channels != 3 {
        return Err(Error::Data(format!(
            "expected a {size}x{size} RGB image, got {}x{} with {} channel(s)",
            image.width, image.height, image.channels
        )));
    }
    let pred = model.predict(&image.to_tensor()?)?;
    let mask = pred.mask.resized(image.height, image.width);
    let uncertainty = pred
        .uncertainty
        .map(|u| {
            let (gh, gw) = model.grid();
            let grid = PseudoMask::new(gh, gw, u.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect())?;
            Ok::<_, Error>(Image::gray(&grid.resized(image.height, image.width)))
        })
        .transpose()?;
    Ok(InferOutput {
        overlay: overlay(image, &mask)?,
        mask,
        uncertainty,
    })
}

impl InferOutput {
    /// `<stem>_mask.pgm`, `<stem>_overlay.ppm` and, if present,
    /// `<stem>_uncertainty.pgm` under `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        Image::gray(&self.mask).write(&dir.join(format!("{stem}_mask.pgm")))?;
        self.overlay.write(&dir.join(format!("{stem}_overlay.ppm")))?;
        if let Some(u) = &self.uncertainty {
            u.write(&dir.join(format!("{stem}_uncertainty.pgm")))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_blends_foreground_only() {
        let image = Image::new(2, 1, 3, vec![100, 100, 100, 10, 20, 30]).unwrap();
        let mask = PseudoMask::new(1, 2, vec![0, 1]).unwrap();
        let out = overlay(&image, &mask).unwrap();
        assert_eq!(&out.data[..3], &[100, 100, 100]);
        assert_eq!(&out.data[3..], &[120, 23, 53]);
        let wrong = PseudoMask::new(2, 2, vec![0; 4]).unwrap();
        assert!(overlay(&image, &wrong).is_err());
    }
}
