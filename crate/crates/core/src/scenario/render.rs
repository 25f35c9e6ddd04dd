//! Pinhole rendering of the UAV as a bright disk, and binary PGM I/O.

use super::ScenarioConfig;

/// 8-bit grayscale frame, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GrayFrame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayFrame {
    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Disk {
    /// Pixel coordinates of the center; pixel `(i, j)` covers `[i, i+1) x [j, j+1)`.
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub frame: GrayFrame,
    /// False when the UAV is behind the camera and only background was drawn.
    pub in_view: bool,
}

const BACKGROUND: u8 = 24;
const TEXTURE_AMPLITUDE: u8 = 12;
const UAV_LEVEL: u8 = 235;

/// Deterministic additive background texture.
fn texture(x: usize, y: usize) -> u8 {
    let h = (x as u32).wrapping_mul(73_856_093) ^ (y as u32).wrapping_mul(19_349_663);
    let h = h ^ (h >> 13);
    (h.wrapping_mul(0x5bd1_e995) >> 24) as u8 % (TEXTURE_AMPLITUDE + 1)
}

fn background(width: usize, height: usize) -> GrayFrame {
    let mut frame = GrayFrame::filled(width, height, BACKGROUND);
    for y in 0..height {
        for x in 0..width {
            frame.pixels[y * width + x] += texture(x, y);
        }
    }
    frame
}

/// Image-plane disk for a UAV at world position `pos`, or `None` when it is
/// behind the camera.
pub fn projected_disk(pos: [f64; 3], cfg: &ScenarioConfig) -> Option<Disk> {
    let rel = [
        pos[0] - cfg.bs_position[0],
        pos[1] - cfg.bs_position[1],
        pos[2] - cfg.bs_position[2],
    ];
    if rel[1] <= 1e-6 {
        return None;
    }
    let cam = cfg.camera;
    let dist = (rel[0] * rel[0] + rel[1] * rel[1] + rel[2] * rel[2]).sqrt();
    Some(Disk {
        cx: cam.width as f64 / 2.0 + cam.focal_px * rel[0] / rel[1],
        cy: cam.height as f64 / 2.0 - cam.focal_px * rel[2] / rel[1],
        radius: cfg.disk_radius_px * cfg.reference_distance / dist,
    })
}

pub fn render_frame(pos: [f64; 3], cfg: &ScenarioConfig) -> RenderedFrame {
    let (w, h) = (cfg.camera.width, cfg.camera.height);
    let mut frame = background(w, h);
    let Some(disk) = projected_disk(pos, cfg) else {
        return RenderedFrame { frame, in_view: false };
    };
    let r2 = disk.radius * disk.radius;
    let x0 = (disk.cx - disk.radius - 1.0).floor().max(0.0) as usize;
    let y0 = (disk.cy - disk.radius - 1.0).floor().max(0.0) as usize;
    let x1 = ((disk.cx + disk.radius + 1.0).ceil().max(0.0) as usize).min(w);
    let y1 = ((disk.cy + disk.radius + 1.0).ceil().max(0.0) as usize).min(h);
    for y in y0..y1 {
        for x in x0..x1 {
            let dx = x as f64 + 0.5 - disk.cx;
            let dy = y as f64 + 0.5 - disk.cy;
            if dx * dx + dy * dy <= r2 {
                frame.pixels[y * w + x] = UAV_LEVEL;
            }
        }
    }
    RenderedFrame { frame, in_view: true }
}

pub fn encode_pgm(frame: &GrayFrame) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend_from_slice(&frame.pixels);
    out
}

/// Decodes a binary (P5) PGM with maxval 255.
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayFrame, String> {
    let mut pos = 0;
    let mut next_token = || -> Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if next_token()? != "P5" {
        return Err("not a binary PGM (P5)".into());
    }
    let parse = |t: String, what: &str| t.parse::<usize>().map_err(|_| format!("bad {what}: {t:?}"));
    let width = parse(next_token()?, "width")?;
    let height = parse(next_token()?, "height")?;
    let maxval = parse(next_token()?, "maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let data_start = pos + 1;
    let expected = width * height;
    let available = bytes.len().saturating_sub(data_start);
    if available < expected {
        return Err(format!("truncated raster: {available} of {expected} bytes"));
    }
    Ok(GrayFrame {
        width,
        height,
        pixels: bytes[data_start..data_start + expected].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ScenarioConfig {
        ScenarioConfig::default()
    }

    fn bright_bbox(f: &GrayFrame) -> Option<(usize, usize, usize, usize)> {
        let mut bbox: Option<(usize, usize, usize, usize)> = None;
        for y in 0..f.height {
            for x in 0..f.width {
                if f.get(x, y) == UAV_LEVEL {
                    bbox = Some(match bbox {
                        None => (x, y, x, y),
                        Some((a, b, c, d)) => (a.min(x), b.min(y), c.max(x), d.max(y)),
                    });
                }
            }
        }
        bbox
    }

    #[test]
    fn on_axis_disk_is_centered() {
        let c = cfg();
        let pos = [c.bs_position[0], c.bs_position[1] + c.reference_distance, c.bs_position[2]];
        let d = projected_disk(pos, &c).unwrap();
        assert_eq!((d.cx, d.cy), (32.0, 32.0));
        assert!((d.radius - c.disk_radius_px).abs() < 1e-12);
        let r = render_frame(pos, &c);
        assert!(r.in_view);
        let (x0, y0, x1, y1) = bright_bbox(&r.frame).unwrap();
        // Symmetric about the image center.
        assert_eq!(x0 + x1 + 1, 64);
        assert_eq!(y0 + y1 + 1, 64);
    }

    #[test]
    fn doubling_distance_halves_radius() {
        let c = cfg();
        let near = [c.bs_position[0], c.bs_position[1] + c.reference_distance, c.bs_position[2]];
        let far = [near[0], c.bs_position[1] + 2.0 * c.reference_distance, near[2]];
        let rn = projected_disk(near, &c).unwrap().radius;
        let rf = projected_disk(far, &c).unwrap().radius;
        assert_eq!(rn.round(), 6.0);
        assert_eq!(rf.round(), 3.0);
        let width = |f: &GrayFrame| {
            let (x0, _, x1, _) = bright_bbox(f).unwrap();
            x1 - x0 + 1
        };
        assert_eq!(width(&render_frame(near, &c).frame), 12);
        assert_eq!(width(&render_frame(far, &c).frame), 6);
    }

    #[test]
    fn disk_center_monotone_in_azimuth() {
        let c = cfg();
        let mut last_cx = f64::NEG_INFINITY;
        let mut last_pixel_center = f64::NEG_INFINITY;
        for i in 0..40 {
            let az = -0.7 + 1.4 * i as f64 / 39.0;
            let pos = [
                c.bs_position[0] + 50.0 * az.sin(),
                c.bs_position[1] + 50.0 * az.cos(),
                c.bs_position[2] + 5.0,
            ];
            let d = projected_disk(pos, &c).unwrap();
            assert!(d.cx > last_cx);
            last_cx = d.cx;
            let (x0, _, x1, _) = bright_bbox(&render_frame(pos, &c).frame).unwrap();
            let center = (x0 + x1) as f64 / 2.0;
            assert!(center >= last_pixel_center);
            last_pixel_center = center;
        }
    }

    #[test]
    fn behind_camera_is_background_only() {
        let c = cfg();
        let r = render_frame([0.0, c.bs_position[1] - 5.0, 20.0], &c);
        assert!(!r.in_view);
        assert!(bright_bbox(&r.frame).is_none());
        assert_eq!(r.frame.pixels.len(), 64 * 64);
    }

    #[test]
    fn pgm_round_trip_and_errors() {
        let c = cfg();
        let f = render_frame([3.0, 50.0, 20.0], &c).frame;
        let bytes = encode_pgm(&f);
        assert!(bytes.starts_with(b"P5\n64 64\n255\n"));
        assert_eq!(decode_pgm(&bytes).unwrap(), f);
        assert!(decode_pgm(&bytes[..bytes.len() - 1]).unwrap_err().contains("truncated"));
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pgm(b"P5\n1 1\n65535\n00").is_err());
        let commented = b"P5\n# c\n2 1\n255\n\x01\x02";
        assert_eq!(decode_pgm(commented).unwrap().pixels, vec![1, 2]);
    }
}
