//! Binary little-endian PLY persistence for Gaussian fields.
//!
//! One `vertex` element with fourteen `float` properties followed by a `uchar`
//! subgroup tag. Files written here always use the canonical property order;
//! the reader accepts any order of the same property set.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{GaussianField, GaussianPrimitive, Subgroup};

const FLOAT_PROPS: [&str; 14] = [
    "x", "y", "z", "rot_w", "rot_x", "rot_y", "rot_z", "scale_x", "scale_y", "scale_z", "r", "g", "b", "opacity",
];
const TAG_PROP: &str = "subgroup";
const RECORD_BYTES: usize = FLOAT_PROPS.len() * 4 + 1;

pub fn write_field<W: Write>(field: &GaussianField, mut out: W) -> Result<()> {
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {}\n", field.len()));
    for name in FLOAT_PROPS {
        header.push_str(&format!("property float {name}\n"));
    }
    header.push_str(&format!("property uchar {TAG_PROP}\nend_header\n"));
    out.write_all(header.as_bytes())?;

    let mut buf = Vec::with_capacity(field.len() * RECORD_BYTES);
    for (p, tag) in field.iter() {
        let values = p.mu.iter().chain(&p.rot).chain(&p.scale).chain(&p.color).chain(std::iter::once(&p.opacity));
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.push(tag as u8);
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

pub fn export_field(field: &GaussianField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(Error::at_path(path))?;
    write_field(field, std::io::BufWriter::new(file))
}

pub fn import_field(path: impl AsRef<Path>) -> Result<GaussianField> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(Error::at_path(path))?;
    read_field(BufReader::new(file))
}

/// Column of each property within a record, in canonical order.
struct Layout {
    float_offsets: [usize; 14],
    tag_offset: usize,
    count: usize,
}

fn read_header<R: BufRead>(reader: &mut R) -> Result<(Layout, u64)> {
    let mut offset = 0u64;
    let mut line = Vec::new();
    let mut next_line = |reader: &mut R, offset: &mut u64| -> Result<(u64, String)> {
        line.clear();
        let start = *offset;
        let n = reader.read_until(b'\n', &mut line)?;
        if n == 0 {
            return Err(Error::format(start, "unexpected end of header"));
        }
        *offset += n as u64;
        let text = std::str::from_utf8(&line).map_err(|_| Error::format(start, "header is not ASCII"))?;
        Ok((start, text.trim_end_matches(['\n', '\r']).to_string()))
    };

    let (at, magic) = next_line(reader, &mut offset)?;
    if magic != "ply" {
        return Err(Error::format(at, "missing `ply` magic"));
    }

    let mut count = None;
    let mut props: Vec<(String, String)> = Vec::new();
    let mut seen_format = false;
    loop {
        let (at, text) = next_line(reader, &mut offset)?;
        let words: Vec<&str> = text.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", "binary_little_endian", "1.0"] => seen_format = true,
            ["format", other, ..] => {
                return Err(Error::format(at, format!("unsupported format `{other}`")));
            }
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err(Error::format(at, "duplicate vertex element"));
                }
                let n: usize = n.parse().map_err(|_| Error::format(at, format!("bad vertex count `{n}`")))?;
                count = Some(n);
            }
            ["element", name, ..] => {
                return Err(Error::format(at, format!("unexpected element `{name}`")));
            }
            ["property", ty, name] => {
                if count.is_none() {
                    return Err(Error::format(at, "property before element"));
                }
                let known_float = FLOAT_PROPS.contains(name);
                if !known_float && *name != TAG_PROP {
                    return Err(Error::format(at, format!("unknown property `{name}`")));
                }
                let expected = if known_float { "float" } else { "uchar" };
                let ty_ok = *ty == expected
                    || (known_float && *ty == "float32")
                    || (!known_float && *ty == "uint8");
                if !ty_ok {
                    return Err(Error::format(at, format!("property `{name}` must be {expected}, got {ty}")));
                }
                if props.iter().any(|(n, _)| n == name) {
                    return Err(Error::format(at, format!("duplicate property `{name}`")));
                }
                props.push((name.to_string(), ty.to_string()));
            }
            _ => return Err(Error::format(at, format!("malformed header line `{text}`"))),
        }
    }
    if !seen_format {
        return Err(Error::format(offset, "missing format line"));
    }
    let count = count.ok_or_else(|| Error::format(offset, "missing vertex element"))?;

    let mut float_offsets = [usize::MAX; 14];
    let mut tag_offset = usize::MAX;
    let mut col = 0;
    for (name, _) in &props {
        if name == TAG_PROP {
            tag_offset = col;
            col += 1;
        } else {
            let idx = FLOAT_PROPS.iter().position(|p| p == name).expect("validated");
            float_offsets[idx] = col;
            col += 4;
        }
    }
    if let Some(i) = float_offsets.iter().position(|&o| o == usize::MAX) {
        return Err(Error::format(offset, format!("missing property `{}`", FLOAT_PROPS[i])));
    }
    if tag_offset == usize::MAX {
        return Err(Error::format(offset, "missing property `subgroup`"));
    }
    Ok((
        Layout {
            float_offsets,
            tag_offset,
            count,
        },
        offset,
    ))
}

pub fn read_field<R: BufRead>(mut reader: R) -> Result<GaussianField> {
    let (layout, body_start) = read_header(&mut reader)?;
    let mut field = GaussianField::with_capacity(layout.count);
    let mut record = [0u8; RECORD_BYTES];
    for i in 0..layout.count {
        let at = body_start + (i * RECORD_BYTES) as u64;
        read_full(&mut reader, &mut record, at)?;
        let f = |k: usize| {
            let o = layout.float_offsets[k];
            f32::from_le_bytes([record[o], record[o + 1], record[o + 2], record[o + 3]])
        };
        let prim = GaussianPrimitive {
            mu: [f(0), f(1), f(2)],
            rot: [f(3), f(4), f(5), f(6)],
            scale: [f(7), f(8), f(9)],
            color: [f(10), f(11), f(12)],
            opacity: f(13),
        };
        prim.validate()
            .map_err(|e| Error::Validation(format!("vertex {i} (byte {at}): {e}")))?;
        let tag_byte = record[layout.tag_offset];
        let tag = Subgroup::from_u8(tag_byte)
            .ok_or_else(|| Error::format(at + layout.tag_offset as u64, format!("unknown subgroup tag {tag_byte}")))?;
        field.push(prim, tag);
    }
    let mut extra = [0u8; 1];
    if reader.read(&mut extra)? != 0 {
        let at = body_start + (layout.count * RECORD_BYTES) as u64;
        return Err(Error::format(at, "trailing bytes after vertex data"));
    }
    Ok(field)
}

fn read_full<R: Read>(reader: &mut R, buf: &mut [u8], at: u64) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = reader.read(&mut buf[filled..])?;
        if n == 0 {
            return Err(Error::format(at + filled as u64, "truncated vertex payload"));
        }
        filled += n;
    }
    Ok(())
}
