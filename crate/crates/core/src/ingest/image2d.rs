use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};
use ndarray::Array2;

use super::{normalize_min_max, PlaneLabel, SliceRecord, SourceKind, TumorLabel};
use crate::error::{Error, Result};

/// Labels supplied alongside a 2D image.
#[derive(Debug, Clone, Default)]
pub struct ImageLabels {
    pub plane: Option<PlaneLabel>,
    pub tumor: Option<TumorLabel>,
    /// Fail with `MissingLabel` when no tumor label is given.
    pub require_tumor: bool,
    /// Defaults to the file stem.
    pub volume_id: Option<String>,
}

/// Loads an 8/16-bit grayscale or RGB(A) raster as a `Native2D` slice.
/// RGB is averaged across channels; the result is min-max normalized.
pub fn load_image2d(path: &Path, labels: &ImageLabels) -> Result<SliceRecord> {
    let plane = labels
        .plane
        .ok_or_else(|| Error::MissingLabel(format!("plane label for {}", path.display())))?;
    if labels.require_tumor && labels.tumor.is_none() {
        return Err(Error::MissingLabel(format!("tumor label for {}", path.display())));
    }
    let pixels = load_gray_normalized(path)?;
    Ok(SliceRecord {
        pixels,
        plane,
        volume_id: labels.volume_id.clone().unwrap_or_else(|| {
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        }),
        slice_index: 0,
        source_kind: SourceKind::Native2D,
        tumor_label: labels.tumor,
    })
}

/// Grayscale, min-max normalized pixels of an arbitrary raster image.
pub fn load_gray_normalized(path: &Path) -> Result<Array2<f32>> {
    let img = open(path)?;
    let mut pixels = gray_values(&img);
    normalize_min_max(pixels.as_slice_mut().expect("contiguous"));
    Ok(pixels)
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| Error::UnreadableImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn gray_values(img: &DynamicImage) -> Array2<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(b) => {
            Array2::from_shape_fn((h, w), |(r, c)| b.get_pixel(c as u32, r as u32)[0] as f32)
        }
        DynamicImage::ImageLumaA8(b) => {
            Array2::from_shape_fn((h, w), |(r, c)| b.get_pixel(c as u32, r as u32)[0] as f32)
        }
        DynamicImage::ImageLuma16(b) => {
            Array2::from_shape_fn((h, w), |(r, c)| b.get_pixel(c as u32, r as u32)[0] as f32)
        }
        DynamicImage::ImageLumaA16(b) => {
            Array2::from_shape_fn((h, w), |(r, c)| b.get_pixel(c as u32, r as u32)[0] as f32)
        }
        DynamicImage::ImageRgb16(b) => Array2::from_shape_fn((h, w), |(r, c)| {
            let p = b.get_pixel(c as u32, r as u32);
            (p[0] as f32 + p[1] as f32 + p[2] as f32) / 3.0
        }),
        DynamicImage::ImageRgba16(b) => Array2::from_shape_fn((h, w), |(r, c)| {
            let p = b.get_pixel(c as u32, r as u32);
            (p[0] as f32 + p[1] as f32 + p[2] as f32) / 3.0
        }),
        other => {
            let rgb = other.to_rgb32f();
            Array2::from_shape_fn((h, w), |(r, c)| {
                let p = rgb.get_pixel(c as u32, r as u32);
                (p[0] + p[1] + p[2]) / 3.0
            })
        }
    }
}

/// Infers labels from a `<...>/<plane>/<file>` or `<...>/<tumor>/<file>`
/// directory convention: any path component naming a plane or tumor class.
pub fn label_from_path(path: &Path) -> ImageLabels {
    let mut labels = ImageLabels::default();
    for comp in path.parent().into_iter().flat_map(|p| p.components()) {
        let s = comp.as_os_str().to_string_lossy();
        if s.len() > 2 {
            if let Ok(p) = s.parse::<PlaneLabel>() {
                labels.plane = Some(p);
            }
        }
        if let Ok(t) = s.parse::<TumorLabel>() {
            labels.tumor = Some(t);
        }
    }
    labels
}

/// Stores a [0,1] slice as a 16-bit grayscale PNG.
pub fn save_slice_png(pixels: &Array2<f32>, path: &Path) -> Result<()> {
    let (h, w) = pixels.dim();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |c, r| {
        Luma([(pixels[[r as usize, c as usize]].clamp(0.0, 1.0) * 65535.0).round() as u16])
    });
    buf.save(path).map_err(|e| Error::UnreadableImage {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Reads a slice written by [`save_slice_png`] without renormalizing.
pub fn load_slice_png(path: &Path) -> Result<Array2<f32>> {
    let img = open(path)?;
    let scale = match img {
        DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => 65535.0,
        _ => 255.0,
    };
    Ok(gray_values(&img).mapv(|v| v / scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, RgbImage};

    fn labels() -> ImageLabels {
        ImageLabels {
            plane: Some(PlaneLabel::Axial),
            ..Default::default()
        }
    }

    #[test]
    fn black_image_is_all_zero() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("black.png");
        GrayImage::new(8, 6).save(&p).unwrap();
        let rec = load_image2d(&p, &labels()).unwrap();
        assert_eq!(rec.pixels.dim(), (6, 8));
        assert!(rec.pixels.iter().all(|&v| v == 0.0));
        assert_eq!(rec.source_kind, SourceKind::Native2D);
        assert_eq!(rec.volume_id, "black");
    }

    #[test]
    fn endpoints_map_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("two.png");
        let img = GrayImage::from_fn(4, 4, |x, _| Luma([if x < 2 { 0 } else { 255 }]));
        img.save(&p).unwrap();
        let rec = load_image2d(&p, &labels()).unwrap();
        let mut vals: Vec<f32> = rec.pixels.iter().copied().collect();
        vals.dedup();
        vals.sort_by(f32::total_cmp);
        vals.dedup();
        assert_eq!(vals, vec![0.0, 1.0]);
    }

    #[test]
    fn constant_rgb_becomes_zero() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgb.png");
        RgbImage::from_pixel(5, 5, image::Rgb([30, 60, 90])).save(&p).unwrap();
        assert_eq!(gray_values(&open(&p).unwrap())[[0, 0]], 60.0 / 255.0);
        let rec = load_image2d(&p, &labels()).unwrap();
        assert!(rec.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_labels_and_unreadable_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        GrayImage::new(2, 2).save(&p).unwrap();
        assert!(matches!(
            load_image2d(&p, &ImageLabels::default()),
            Err(Error::MissingLabel(_))
        ));
        let need_tumor = ImageLabels {
            require_tumor: true,
            ..labels()
        };
        assert!(matches!(load_image2d(&p, &need_tumor), Err(Error::MissingLabel(_))));
        let junk = dir.path().join("junk.png");
        std::fs::write(&junk, b"not a png").unwrap();
        assert!(matches!(
            load_image2d(&junk, &labels()),
            Err(Error::UnreadableImage { .. })
        ));
    }

    #[test]
    fn path_convention_labels() {
        let l = label_from_path(Path::new("data/glioma/coronal/img_001.png"));
        assert_eq!(l.plane, Some(PlaneLabel::Coronal));
        assert_eq!(l.tumor, Some(TumorLabel::Glioma));
    }

    #[test]
    fn slice_png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.png");
        let px = Array2::from_shape_fn((7, 5), |(r, c)| (r * 5 + c) as f32 / 34.0);
        save_slice_png(&px, &p).unwrap();
        let back = load_slice_png(&p).unwrap();
        for (a, b) in px.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-7);
        }
    }
}
