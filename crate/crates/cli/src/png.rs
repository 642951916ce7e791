use lvgan_core::image::Image;

use crate::error::{CliError, CliResult};

/// 8-bit PNG encoding of a one- or three-channel image.
pub fn encode_png(img: &Image) -> CliResult<Vec<u8>> {
    let s = img.shape;
    let color = match s.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(CliError::Usage(format!("cannot encode {c} channels as PNG"))),
    };
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, s.width as u32, s.height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| std::io::Error::other(e.to_string()))?;
        w.write_image_data(&img.to_bytes_hwc()).map_err(|e| std::io::Error::other(e.to_string()))?;
    }
    Ok(out)
}
