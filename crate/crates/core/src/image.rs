//! Page rasters: decoding, grayscale conversion, patch tiling and the
//! background (mode) intensity estimate.

use std::io;
use std::path::Path;

use image::{ColorType, DynamicImage, ImageError, ImageReader};
use thiserror::Error;

use crate::error::{invalid, mismatch, Result};

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("file not found: {0}")]
    NotFound(String),
    #[error("unsupported image format: {0}")]
    Unsupported(String),
    #[error("corrupt image data: {0}")]
    Corrupt(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// An 8-bit raster with 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    channels: u8,
    data: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, channels: u8, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid("dimensions", format!("{width}x{height} has a zero side")));
        }
        if channels != 1 && channels != 3 {
            return Err(invalid("channels", format!("{channels} (expected 1 or 3)")));
        }
        let expected = width * height * channels as usize;
        if data.len() != expected {
            return Err(mismatch("raster data length", expected, data.len()));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }
}

/// Single-channel 8-bit image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid("dimensions", format!("{width}x{height} has a zero side")));
        }
        if data.len() != width * height {
            return Err(mismatch("gray data length", width * height, data.len()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

/// A grayscale page cut into non-overlapping `patch_size`² tiles.
///
/// Tiles are stored contiguously in row-major grid order; each tile is
/// itself row-major. `source_width`/`source_height` record the page size
/// before edge-replication padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    patch_size: usize,
    rows: usize,
    cols: usize,
    source_width: usize,
    source_height: usize,
    tiles: Vec<u8>,
}

impl PatchGrid {
    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn source_size(&self) -> (usize, usize) {
        (self.source_width, self.source_height)
    }

    /// Tile at row-major grid index `index`.
    pub fn patch(&self, index: usize) -> &[u8] {
        let area = self.patch_size * self.patch_size;
        &self.tiles[index * area..(index + 1) * area]
    }

    pub fn patches(&self) -> impl ExactSizeIterator<Item = &[u8]> + '_ {
        self.tiles.chunks_exact(self.patch_size * self.patch_size)
    }

    /// Reassemble the (padded) image from its tiles.
    pub fn untile(&self) -> GrayImage {
        let p = self.patch_size;
        let width = self.cols * p;
        let height = self.rows * p;
        let mut data = vec![0u8; width * height];
        for (index, tile) in self.patches().enumerate() {
            let (gr, gc) = (index / self.cols, index % self.cols);
            for (ty, row) in tile.chunks_exact(p).enumerate() {
                let start = (gr * p + ty) * width + gc * p;
                data[start..start + p].copy_from_slice(row);
            }
        }
        GrayImage {
            width,
            height,
            data,
        }
    }
}

/// Decode a PNG or PNM (binary PPM/PGM) page. Alpha is discarded; 16-bit and
/// float samples are rejected rather than truncated.
pub fn load_image(path: impl AsRef<Path>) -> Result<RasterImage, LoadError> {
    let path = path.as_ref();
    let reader = match ImageReader::open(path) {
        Ok(r) => r,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(LoadError::NotFound(path.display().to_string()))
        }
        Err(e) => return Err(LoadError::Io(e)),
    };
    let reader = reader.with_guessed_format()?;
    if reader.format().is_none() {
        return Err(LoadError::Unsupported(format!(
            "{}: unrecognized signature",
            path.display()
        )));
    }
    let decoded = reader.decode().map_err(|e| classify(path, e))?;
    from_dynamic(decoded)
}

fn classify(path: &Path, err: ImageError) -> LoadError {
    let what = format!("{}: {err}", path.display());
    match err {
        ImageError::Unsupported(_) => LoadError::Unsupported(what),
        ImageError::IoError(e) if e.kind() != io::ErrorKind::UnexpectedEof => LoadError::Io(e),
        _ => LoadError::Corrupt(what),
    }
}

fn from_dynamic(img: DynamicImage) -> Result<RasterImage, LoadError> {
    let (width, height) = (img.width() as usize, img.height() as usize);
    let (channels, data) = match img.color() {
        ColorType::L8 => (1, img.into_luma8().into_raw()),
        ColorType::La8 => (1, img.into_luma8().into_raw()),
        ColorType::Rgb8 => (3, img.into_rgb8().into_raw()),
        ColorType::Rgba8 => (3, img.into_rgb8().into_raw()),
        other => {
            return Err(LoadError::Unsupported(format!(
                "{other:?} samples; only 8-bit gray/RGB(A) is accepted"
            )))
        }
    };
    RasterImage::new(width, height, channels, data).map_err(|e| LoadError::Corrupt(e.to_string()))
}

/// BT.601 luma, `(299 r + 587 g + 114 b) / 1000` rounded half-up, in exact
/// integer arithmetic. Gray inputs pass through untouched.
pub fn to_grayscale(img: &RasterImage) -> GrayImage {
    let data = match img.channels {
        1 => img.data.clone(),
        _ => img
            .data
            .chunks_exact(3)
            .map(|px| {
                let weighted = 299 * px[0] as u32 + 587 * px[1] as u32 + 114 * px[2] as u32;
                ((weighted + 500) / 1000) as u8
            })
            .collect(),
    };
    GrayImage {
        width: img.width,
        height: img.height,
        data,
    }
}

/// Tile a page into `patch_size`² patches. Ragged bottom/right margins are
/// padded to the next multiple by replicating the last row/column.
pub fn tile_patches(img: &GrayImage, patch_size: usize) -> Result<PatchGrid> {
    if patch_size == 0 {
        return Err(invalid("patch_size", "must be at least 1"));
    }
    if patch_size > img.width && patch_size > img.height {
        return Err(invalid(
            "patch_size",
            format!(
                "{patch_size} exceeds both page dimensions {}x{}",
                img.width, img.height
            ),
        ));
    }
    let p = patch_size;
    let rows = img.height.div_ceil(p);
    let cols = img.width.div_ceil(p);
    let mut tiles = Vec::with_capacity(rows * cols * p * p);
    for gr in 0..rows {
        for gc in 0..cols {
            for ty in 0..p {
                let y = (gr * p + ty).min(img.height - 1);
                let row = &img.data[y * img.width..(y + 1) * img.width];
                for tx in 0..p {
                    tiles.push(row[(gc * p + tx).min(img.width - 1)]);
                }
            }
        }
    }
    Ok(PatchGrid {
        patch_size,
        rows,
        cols,
        source_width: img.width,
        source_height: img.height,
        tiles,
    })
}

/// Most frequent intensity of the page; ties go to the lowest value.
pub fn mode_intensity(img: &GrayImage) -> u8 {
    let mut hist = [0u64; 256];
    for &v in &img.data {
        hist[v as usize] += 1;
    }
    let mut best = 0usize;
    for v in 1..256 {
        if hist[v] > hist[best] {
            best = v;
        }
    }
    best as u8
}

/// Binary PPM (P6) or PGM (P5) encoding, maxval 255.
pub fn encode_pnm(img: &RasterImage) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn encode_png(img: &RasterImage) -> Result<Vec<u8>, LoadError> {
    use image::ImageEncoder;
    let color = if img.channels == 3 {
        image::ExtendedColorType::Rgb8
    } else {
        image::ExtendedColorType::L8
    };
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(&img.data, img.width as u32, img.height as u32, color)
        .map_err(|e| LoadError::Unsupported(e.to_string()))?;
    Ok(out)
}
