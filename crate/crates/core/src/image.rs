//! Channel-major images with values in `[−1, 1]` and binary PNM I/O.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `C × H × W` image stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub shape: ImageShape,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(shape: ImageShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return dim_err(format!("image {shape:?} needs {} values, got {}", shape.len(), data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: ImageShape, v: f64) -> Self {
        Self {
            shape,
            data: vec![v; shape.len()],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.shape.height + y) * self.shape.width + x]
    }

    /// Linear blend `(1−t)·self + t·other`.
    pub fn blend(&self, other: &Image, t: f64) -> Result<Image> {
        if self.shape != other.shape {
            return dim_err("blend of differently shaped images");
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| (1.0 - t) * a + t * b).collect();
        Ok(Image { shape: self.shape, data })
    }

    /// Encodes as binary PGM (one channel) or PPM (three channels).
    pub fn to_pnm(&self) -> Result<Vec<u8>> {
        let ImageShape { channels, height, width } = self.shape;
        let magic = match channels {
            1 => "P5",
            3 => "P6",
            c => return Err(Error::ImageFormat(format!("cannot encode {c} channels as PNM"))),
        };
        let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    out.push(to_byte(self.get(c, y, x)));
                }
            }
        }
        Ok(out)
    }

    /// Interleaved 8-bit samples (H × W × C).
    pub fn to_bytes_hwc(&self) -> Vec<u8> {
        let ImageShape { channels, height, width } = self.shape;
        let mut out = Vec::with_capacity(self.data.len());
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    out.push(to_byte(self.get(c, y, x)));
                }
            }
        }
        out
    }

    pub fn from_pnm(bytes: &[u8]) -> Result<Image> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::ImageFormat("truncated PNM header".into()));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::ImageFormat("non-ascii header".into()))?);
        }
        pos += 1; // single whitespace after maxval
        let channels = match fields[0] {
            "P5" => 1,
            "P6" => 3,
            other => return Err(Error::ImageFormat(format!("unsupported magic {other}"))),
        };
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::ImageFormat(format!("bad header field {s}")));
        let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if width == 0 || height == 0 || maxval == 0 || maxval > 255 {
            return Err(Error::ImageFormat("only 8-bit non-empty PNM is supported".into()));
        }
        let shape = ImageShape::new(channels, height, width);
        let body = bytes.get(pos..pos + shape.len()).ok_or_else(|| Error::ImageFormat("truncated PNM body".into()))?;
        let mut data = vec![0.0; shape.len()];
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    let b = body[(y * width + x) * channels + c] as f64;
                    data[(c * height + y) * width + x] = 2.0 * b / maxval as f64 - 1.0;
                }
            }
        }
        Ok(Image { shape, data })
    }

    pub fn save_pnm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_pnm()?)?;
        Ok(())
    }

    /// Area-weighted resize plus channel conversion (luma or replication).
    pub fn resized(&self, target: ImageShape) -> Result<Image> {
        let src = match (self.shape.channels, target.channels) {
            (a, b) if a == b => self.clone(),
            (3, 1) => {
                let ImageShape { height, width, .. } = self.shape;
                let mut data = vec![0.0; height * width];
                for y in 0..height {
                    for x in 0..width {
                        data[y * width + x] = 0.299 * self.get(0, y, x) + 0.587 * self.get(1, y, x) + 0.114 * self.get(2, y, x);
                    }
                }
                Image::new(ImageShape::new(1, height, width), data)?
            }
            (1, 3) => {
                let mut data = self.data.clone();
                data.extend_from_slice(&self.data);
                data.extend_from_slice(&self.data);
                Image::new(ImageShape::new(3, self.shape.height, self.shape.width), data)?
            }
            (a, b) => return Err(Error::ImageFormat(format!("cannot convert {a} channels to {b}"))),
        };
        if src.shape == target {
            return Ok(src);
        }
        let (sh, sw) = (src.shape.height as f64, src.shape.width as f64);
        let (th, tw) = (target.height, target.width);
        let mut data = vec![0.0; target.len()];
        for c in 0..target.channels {
            for ty in 0..th {
                let y0 = ty as f64 * sh / th as f64;
                let y1 = (ty + 1) as f64 * sh / th as f64;
                for tx in 0..tw {
                    let x0 = tx as f64 * sw / tw as f64;
                    let x1 = (tx + 1) as f64 * sw / tw as f64;
                    let mut acc = 0.0;
                    let mut wsum = 0.0;
                    let mut sy = y0.floor() as usize;
                    while (sy as f64) < y1 && sy < src.shape.height {
                        let wy = (y1.min(sy as f64 + 1.0) - y0.max(sy as f64)).max(0.0);
                        let mut sx = x0.floor() as usize;
                        while (sx as f64) < x1 && sx < src.shape.width {
                            let wx = (x1.min(sx as f64 + 1.0) - x0.max(sx as f64)).max(0.0);
                            acc += wy * wx * src.get(c, sy, sx);
                            wsum += wy * wx;
                            sx += 1;
                        }
                        sy += 1;
                    }
                    data[(c * th + ty) * tw + tx] = if wsum > 0.0 { acc / wsum } else { 0.0 };
                }
            }
        }
        Image::new(target, data)
    }
}

fn to_byte(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

/// Stacks images into an `n × len` matrix, one flattened image per row.
pub fn stack(images: &[Image]) -> Result<Matrix> {
    let shape = images.first().map(|i| i.shape).ok_or_else(|| Error::EmptyDataset("no images to stack".into()))?;
    if images.iter().any(|i| i.shape != shape) {
        return dim_err("images differ in shape");
    }
    let data = images.iter().flat_map(|i| i.data.iter().copied()).collect();
    Matrix::from_vec(images.len(), shape.len(), data)
}

pub fn unstack(batch: &Matrix, shape: ImageShape) -> Result<Vec<Image>> {
    if batch.cols() != shape.len() {
        return dim_err(format!("row length {} for image {shape:?}", batch.cols()));
    }
    (0..batch.rows()).map(|r| Image::new(shape, batch.row(r).to_vec())).collect()
}

/// Tiles images row-major into one grid image with a one-pixel gutter.
pub fn grid(images: &[Image], columns: usize) -> Result<Image> {
    let shape = images.first().map(|i| i.shape).ok_or_else(|| Error::EmptyDataset("empty grid".into()))?;
    let cols = columns.max(1).min(images.len());
    let rows = images.len().div_ceil(cols);
    let gh = rows * (shape.height + 1) - 1;
    let gw = cols * (shape.width + 1) - 1;
    let gshape = ImageShape::new(shape.channels, gh, gw);
    let mut data = vec![-1.0; gshape.len()];
    for (n, img) in images.iter().enumerate() {
        if img.shape != shape {
            return dim_err("grid images differ in shape");
        }
        let (oy, ox) = ((n / cols) * (shape.height + 1), (n % cols) * (shape.width + 1));
        for c in 0..shape.channels {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    data[(c * gh + oy + y) * gw + ox + x] = img.get(c, y, x);
                }
            }
        }
    }
    Image::new(gshape, data)
}
