//! Dataset directory layout: binary PPM/PGM images plus text annotations.

use std::fs;
use std::path::{Path, PathBuf};

use super::Clip;
use crate::autodiff::Tensor;
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::task::{Modality, Task};

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_netpbm(path: &Path, magic: &str, image: &Tensor, channels: usize) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != channels {
        return Err(Error::Shape(format!("{}: expected ({channels}, H, W) image, got {shape:?}", path.display())));
    }
    let (h, w) = (shape[1], shape[2]);
    let plane = h * w;
    let d = image.data();
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.reserve(plane * channels);
    for i in 0..plane {
        for c in 0..channels {
            out.push(to_byte(d[c * plane + i]));
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    write_netpbm(path, "P6", image, 3)
}

pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    write_netpbm(path, "P5", image, 1)
}

/// Parses the four header fields, returning them and the payload offset.
fn parse_header(path: &Path, bytes: &[u8]) -> Result<([String; 4], usize)> {
    let mut fields: Vec<String> = Vec::with_capacity(4);
    let mut i = 0;
    let mut line = 1;
    while fields.len() < 4 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                if bytes[i] == b'\n' {
                    line += 1;
                }
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::format(path, Some(line), "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if i >= bytes.len() {
        return Err(Error::format(path, Some(line), "missing pixel data"));
    }
    let fields: [String; 4] = fields.try_into().expect("four fields");
    Ok((fields, i + 1))
}

fn read_netpbm(path: &Path, magic: &str, channels: usize) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ([m, w, h, max], offset) = parse_header(path, &bytes)?;
    if m != magic {
        return Err(Error::format(path, Some(1), format!("expected magic {magic}, found {m:?}")));
    }
    let num = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>().map_err(|_| Error::format(path, Some(2), format!("invalid {what} {s:?}")))
    };
    let (w, h, max) = (num(&w, "width")?, num(&h, "height")?, num(&max, "maxval")?);
    if max != 255 {
        return Err(Error::format(path, Some(3), format!("only 8-bit images are supported (maxval {max})")));
    }
    let plane = w * h;
    let payload = &bytes[offset..];
    if payload.len() != plane * channels {
        return Err(Error::format(
            path,
            None,
            format!("expected {} pixel bytes, found {}", plane * channels, payload.len()),
        ));
    }
    let mut data = vec![0.0; plane * channels];
    for i in 0..plane {
        for c in 0..channels {
            data[c * plane + i] = payload[i * channels + c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![channels, h, w], data).map_err(Error::from)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    read_netpbm(path, "P6", 3)
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    read_netpbm(path, "P5", 1)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn frame_name(i: usize, ext: &str) -> String {
    format!("{i:04}.{ext}")
}

const MAP_DIRS: [&str; 4] = ["depth", "thermal", "event", "masks"];

fn maps_of<'a>(clip: &'a Clip, dir: &str) -> &'a [Tensor] {
    match dir {
        "depth" => &clip.depth,
        "thermal" => &clip.thermal,
        "event" => &clip.event,
        _ => &clip.masks,
    }
}

pub fn save_clip(dir: &Path, clip: &Clip) -> Result<()> {
    create_dir(&dir.join("frames"))?;
    for sub in MAP_DIRS {
        create_dir(&dir.join(sub))?;
    }
    for (i, f) in clip.frames.iter().enumerate() {
        write_ppm(&dir.join("frames").join(frame_name(i, "ppm")), f)?;
    }
    for sub in MAP_DIRS {
        for (i, m) in maps_of(clip, sub).iter().enumerate() {
            write_pgm(&dir.join(sub).join(frame_name(i, "pgm")), m)?;
        }
    }
    let mut boxes = String::new();
    for (i, b) in clip.boxes.iter().enumerate() {
        let [x, y, w, h] = b.to_xywh();
        boxes.push_str(&format!("{i} {x} {y} {w} {h}\n"));
    }
    let write = |name: &str, text: String| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(p, e))
    };
    write("boxes.txt", boxes)?;
    write("lang.txt", format!("{}\n", clip.text))?;
    write("meta.txt", format!("size={}\nlength={}\nseed={}\n", clip.size, clip.len(), clip.seed))?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

struct Meta {
    size: usize,
    length: usize,
    seed: u64,
}

fn parse_meta(path: &Path) -> Result<Meta> {
    let text = read_text(path)?;
    let (mut size, mut length, mut seed) = (None, None, None);
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let lno = Some(n + 1);
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, lno, format!("expected key=value, found {line:?}")))?;
        let bad = || Error::format(path, lno, format!("invalid value for {k}: {v:?}"));
        match k.trim() {
            "size" => size = Some(v.trim().parse::<usize>().map_err(|_| bad())?),
            "length" => length = Some(v.trim().parse::<usize>().map_err(|_| bad())?),
            "seed" => seed = Some(v.trim().parse::<u64>().map_err(|_| bad())?),
            other => return Err(Error::format(path, lno, format!("unknown key {other:?}"))),
        }
    }
    let missing = |k: &str| Error::format(path, None, format!("missing key {k}"));
    Ok(Meta {
        size: size.ok_or_else(|| missing("size"))?,
        length: length.ok_or_else(|| missing("length"))?,
        seed: seed.ok_or_else(|| missing("seed"))?,
    })
}

fn parse_boxes(path: &Path, length: usize) -> Result<Vec<BBox>> {
    let text = read_text(path)?;
    let mut boxes = Vec::with_capacity(length);
    for (n, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let lno = Some(n + 1);
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::format(path, lno, format!("expected 5 fields, found {}", fields.len())));
        }
        let idx: usize =
            fields[0].parse().map_err(|_| Error::format(path, lno, format!("invalid frame index {:?}", fields[0])))?;
        if idx != boxes.len() {
            return Err(Error::format(path, lno, format!("missing frame index {} (found {idx})", boxes.len())));
        }
        let mut v = [0.0; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::format(path, lno, format!("invalid number {f:?}")))?;
        }
        boxes.push(BBox::from_xywh(v[0], v[1], v[2], v[3]));
    }
    if boxes.len() != length {
        return Err(Error::format(path, None, format!("{} box lines for a clip of length {length}", boxes.len())));
    }
    Ok(boxes)
}

/// Loads one clip directory. With `task = Some(rgb_n)` an empty
/// description is an error.
pub fn load_clip(dir: &Path, task: Option<Task>) -> Result<Clip> {
    let meta = parse_meta(&dir.join("meta.txt"))?;
    let boxes = parse_boxes(&dir.join("boxes.txt"), meta.length)?;
    let lang_path = dir.join("lang.txt");
    let text = read_text(&lang_path)?.trim().to_string();
    if task == Some(Task::RgbX(Modality::Language)) && text.is_empty() {
        return Err(Error::format(lang_path, Some(1), "empty description for task rgb_n"));
    }
    let check = |p: &Path, t: &Tensor| -> Result<()> {
        if t.shape()[1] != meta.size || t.shape()[2] != meta.size {
            return Err(Error::format(
                p,
                None,
                format!("image is {}x{}, meta.txt declares size {}", t.shape()[2], t.shape()[1], meta.size),
            ));
        }
        Ok(())
    };
    let mut frames = Vec::with_capacity(meta.length);
    for i in 0..meta.length {
        let p = dir.join("frames").join(frame_name(i, "ppm"));
        let t = read_ppm(&p)?;
        check(&p, &t)?;
        frames.push(t);
    }
    let mut maps: Vec<Vec<Tensor>> = Vec::new();
    for sub in MAP_DIRS {
        let mut v = Vec::with_capacity(meta.length);
        for i in 0..meta.length {
            let p = dir.join(sub).join(frame_name(i, "pgm"));
            let t = read_pgm(&p)?;
            check(&p, &t)?;
            v.push(t);
        }
        maps.push(v);
    }
    let masks = maps.pop().expect("masks");
    let event = maps.pop().expect("event");
    let thermal = maps.pop().expect("thermal");
    let depth = maps.pop().expect("depth");
    let id = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(Clip { id, seed: meta.seed, size: meta.size, frames, boxes, masks, depth, thermal, event, text })
}

/// Writes each clip to `dir/<clip id>`.
pub fn save_dataset(dir: &Path, clips: &[Clip]) -> Result<()> {
    create_dir(dir)?;
    for c in clips {
        save_clip(&dir.join(&c.id), c)?;
    }
    Ok(())
}

/// Loads every clip subdirectory of `dir` in name order.
pub fn load_dataset(dir: &Path, task: Option<Task>) -> Result<Vec<Clip>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut subdirs: Vec<PathBuf> = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(dir, e))?;
        let p = e.path();
        if p.is_dir() && p.join("meta.txt").exists() {
            subdirs.push(p);
        }
    }
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::format(dir, None, "no clip directories found"));
    }
    subdirs.iter().map(|p| load_clip(p, task)).collect()
}
