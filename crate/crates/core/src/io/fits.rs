//! Just enough FITS to read and write 2-D image HDUs.
//!
//! Supports uncompressed primary and `IMAGE` extension HDUs with any
//! standard `BITPIX`, honouring `BSCALE`, `BZERO` and `BLANK`. Table
//! extensions are skipped; tile-compressed images are rejected.

use crate::error::{Error, Result};
use crate::grid::Grid;

const BLOCK: usize = 2880;
const CARD: usize = 80;

/// A header value as written in the card.
#[derive(Clone, Debug, PartialEq)]
pub enum HeaderValue {
    Str(String),
    Int(i64),
    Float(f64),
    Bool(bool),
}

impl HeaderValue {
    pub fn as_str(&self) -> Option<&str> {
        match self {
            HeaderValue::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            HeaderValue::Int(i) => Some(*i as f64),
            HeaderValue::Float(f) => Some(*f),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            HeaderValue::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            HeaderValue::Int(i) => Some(*i),
            _ => None,
        }
    }

    fn render(&self) -> String {
        match self {
            HeaderValue::Str(s) => {
                let quoted = format!("'{:<8}'", s.replace('\'', "''"));
                format!("{quoted:<20}")
            }
            HeaderValue::Int(i) => format!("{i:>20}"),
            HeaderValue::Float(f) => format!("{:>20}", format_float(*f)),
            HeaderValue::Bool(b) => format!("{:>20}", if *b { "T" } else { "F" }),
        }
    }
}

fn format_float(f: f64) -> String {
    let s = format!("{f:E}");
    if s.contains('.') {
        s
    } else {
        s.replacen('E', ".0E", 1)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Header {
    cards: Vec<(String, HeaderValue)>,
}

impl Header {
    pub fn get(&self, key: &str) -> Option<&HeaderValue> {
        self.cards.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn set(&mut self, key: &str, value: HeaderValue) {
        match self.cards.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.cards.push((key.to_string(), value)),
        }
    }

    pub fn cards(&self) -> &[(String, HeaderValue)] {
        &self.cards
    }

    /// Stores printable-ASCII `text` across string cards `PREFIX0001`,
    /// `PREFIX0002`, ... (prefix of at most four characters). Chunks never
    /// end in a space, which FITS would drop.
    pub fn set_long_string(&mut self, prefix: &str, text: &str) -> Result<()> {
        if prefix.len() > 4 || !text.bytes().all(|b| (0x20..0x7f).contains(&b)) {
            return Err(Error::invalid("long FITS strings need a short prefix and printable ASCII"));
        }
        let mut rest = text;
        let mut n = 0;
        while !rest.is_empty() {
            let mut take = rest.len().min(LONG_CHUNK);
            while take > 1 && (rest.as_bytes()[take - 1] == b' ' || rest[..take].matches('\'').count() + take > 68) {
                take -= 1;
            }
            n += 1;
            if n > 9999 {
                return Err(Error::invalid("long FITS string too long"));
            }
            self.set(&format!("{prefix}{n:04}"), HeaderValue::Str(rest[..take].to_string()));
            rest = &rest[take..];
        }
        Ok(())
    }

    /// Reassembles a string written by [`Header::set_long_string`].
    pub fn long_string(&self, prefix: &str) -> Option<String> {
        let mut out = String::new();
        for n in 1.. {
            match self.get(&format!("{prefix}{n:04}")).and_then(HeaderValue::as_str) {
                Some(chunk) => out.push_str(chunk),
                None if n == 1 => return None,
                None => break,
            }
        }
        Some(out)
    }
}

const LONG_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageHdu {
    pub header: Header,
    /// `None` for a header-only HDU (`NAXIS = 0`).
    pub data: Option<Grid>,
}

impl ImageHdu {
    pub fn name(&self) -> Option<&str> {
        self.header.get("EXTNAME").and_then(|v| v.as_str())
    }
}

fn parse_value(raw: &str) -> HeaderValue {
    let raw = raw.trim_start();
    if let Some(rest) = raw.strip_prefix('\'') {
        // String: runs to the next lone quote; '' is an escaped quote.
        let mut out = String::new();
        let mut chars = rest.chars().peekable();
        while let Some(c) = chars.next() {
            if c == '\'' {
                if chars.peek() == Some(&'\'') {
                    chars.next();
                    out.push('\'');
                } else {
                    break;
                }
            } else {
                out.push(c);
            }
        }
        return HeaderValue::Str(out.trim_end().to_string());
    }
    let token = raw.split('/').next().unwrap_or("").trim();
    match token {
        "T" => HeaderValue::Bool(true),
        "F" => HeaderValue::Bool(false),
        _ => {
            if let Ok(i) = token.parse::<i64>() {
                HeaderValue::Int(i)
            } else if let Ok(f) = token.replace('D', "E").parse::<f64>() {
                HeaderValue::Float(f)
            } else {
                HeaderValue::Str(token.to_string())
            }
        }
    }
}

/// Parses header cards starting at `pos`; returns the header and the
/// offset of the first data block.
fn read_header(bytes: &[u8], mut pos: usize) -> Result<(Header, usize)> {
    let mut header = Header::default();
    loop {
        if pos + BLOCK > bytes.len() {
            return Err(Error::Corrupt("FITS header truncated before END".into()));
        }
        let block = &bytes[pos..pos + BLOCK];
        pos += BLOCK;
        for card in block.chunks_exact(CARD) {
            let card = std::str::from_utf8(card)
                .map_err(|_| Error::Corrupt("non-ASCII FITS header card".into()))?;
            let key = card[..8].trim_end();
            if key == "END" {
                return Ok((header, pos));
            }
            if card.len() > 9 && &card[8..10] == "= " {
                header.cards.push((key.to_string(), parse_value(&card[10..])));
            }
        }
    }
}

fn axis_dims(header: &Header) -> Result<(i64, Vec<usize>)> {
    let bitpix = header
        .get("BITPIX")
        .and_then(HeaderValue::as_i64)
        .ok_or_else(|| Error::Schema("FITS HDU lacks BITPIX".into()))?;
    let naxis = header
        .get("NAXIS")
        .and_then(HeaderValue::as_i64)
        .ok_or_else(|| Error::Schema("FITS HDU lacks NAXIS".into()))?;
    let mut dims = Vec::new();
    for i in 1..=naxis {
        let n = header
            .get(&format!("NAXIS{i}"))
            .and_then(HeaderValue::as_i64)
            .ok_or_else(|| Error::Schema(format!("FITS HDU lacks NAXIS{i}")))?;
        dims.push(n.max(0) as usize);
    }
    Ok((bitpix, dims))
}

fn decode_pixels(raw: &[u8], bitpix: i64, header: &Header) -> Result<Vec<f64>> {
    let scale = header.get("BSCALE").and_then(HeaderValue::as_f64).unwrap_or(1.0);
    let zero = header.get("BZERO").and_then(HeaderValue::as_f64).unwrap_or(0.0);
    let blank = header.get("BLANK").and_then(HeaderValue::as_i64);
    let int = |v: i64| {
        if Some(v) == blank {
            f64::NAN
        } else {
            zero + scale * v as f64
        }
    };
    let out = match bitpix {
        8 => raw.iter().map(|&b| int(b as i64)).collect(),
        16 => raw
            .chunks_exact(2)
            .map(|c| int(i16::from_be_bytes([c[0], c[1]]) as i64))
            .collect(),
        32 => raw
            .chunks_exact(4)
            .map(|c| int(i32::from_be_bytes(c.try_into().expect("4")) as i64))
            .collect(),
        64 => raw
            .chunks_exact(8)
            .map(|c| int(i64::from_be_bytes(c.try_into().expect("8"))))
            .collect(),
        -32 => raw
            .chunks_exact(4)
            .map(|c| zero + scale * f32::from_be_bytes(c.try_into().expect("4")) as f64)
            .collect(),
        -64 => raw
            .chunks_exact(8)
            .map(|c| zero + scale * f64::from_be_bytes(c.try_into().expect("8")))
            .collect(),
        other => return Err(Error::Schema(format!("unsupported BITPIX {other}"))),
    };
    Ok(out)
}

/// Reads every HDU whose data is empty or a 2-D image.
pub fn read_hdus(bytes: &[u8]) -> Result<Vec<ImageHdu>> {
    if bytes.len() < BLOCK || !bytes.starts_with(b"SIMPLE  =") {
        return Err(Error::Corrupt("not a FITS file".into()));
    }
    let mut pos = 0;
    let mut hdus = Vec::new();
    while pos < bytes.len() {
        let (header, data_start) = read_header(bytes, pos)?;
        let (bitpix, dims) = axis_dims(&header)?;
        if header.get("ZIMAGE").and_then(HeaderValue::as_bool) == Some(true) {
            return Err(Error::Schema(
                "tile-compressed FITS images are not supported; decompress first (e.g. with funpack)".into(),
            ));
        }
        let count: usize = if dims.is_empty() { 0 } else { dims.iter().product() };
        // Tables and other extensions carry a heap of PCOUNT bytes per group.
        let pcount = header.get("PCOUNT").and_then(HeaderValue::as_i64).unwrap_or(0).max(0) as usize;
        let gcount = header.get("GCOUNT").and_then(HeaderValue::as_i64).unwrap_or(1).max(1) as usize;
        let nbytes = (count * (bitpix.unsigned_abs() as usize / 8) + pcount) * gcount;
        if data_start + nbytes > bytes.len() {
            return Err(Error::Corrupt("FITS data unit truncated".into()));
        }
        let is_image = match header.get("XTENSION").and_then(HeaderValue::as_str) {
            None => true,
            Some(x) => x.trim_end() == "IMAGE",
        };
        let data = match dims.as_slice() {
            _ if !is_image => None,
            [] => None,
            [w, h] => {
                let raw = &bytes[data_start..data_start + nbytes];
                Some(Grid::from_vec(*h, *w, decode_pixels(raw, bitpix, &header)?)?)
            }
            // Degenerate extra axes of length one are tolerated.
            [w, h, rest @ ..] if rest.iter().all(|&n| n == 1) => {
                let raw = &bytes[data_start..data_start + nbytes];
                Some(Grid::from_vec(*h, *w, decode_pixels(raw, bitpix, &header)?)?)
            }
            _ => None,
        };
        hdus.push(ImageHdu { header, data });
        pos = data_start + nbytes.div_ceil(BLOCK) * BLOCK;
    }
    Ok(hdus)
}

/// First HDU carrying image data, along with the primary header (merged
/// under the image header's own keys).
pub fn read_first_image(bytes: &[u8]) -> Result<(Header, Grid)> {
    let hdus = read_hdus(bytes)?;
    let primary = hdus[0].header.clone();
    let hdu = hdus
        .into_iter()
        .find(|h| h.data.is_some())
        .ok_or_else(|| Error::Schema("FITS file contains no 2-D image".into()))?;
    let mut merged = primary;
    for (k, v) in hdu.header.cards {
        merged.set(&k, v);
    }
    Ok((merged, hdu.data.expect("checked above")))
}

fn push_card(out: &mut Vec<u8>, key: &str, value: &HeaderValue) {
    let card = format!("{key:<8}= {}", value.render());
    let mut card = card.into_bytes();
    card.resize(CARD, b' ');
    out.extend_from_slice(&card[..CARD]);
}

fn finish_header(out: &mut Vec<u8>) {
    let mut end = b"END".to_vec();
    end.resize(CARD, b' ');
    out.extend_from_slice(&end);
    while out.len() % BLOCK != 0 {
        out.push(b' ');
    }
}

fn push_data(out: &mut Vec<u8>, grid: &Grid) {
    for v in grid.as_slice() {
        out.extend_from_slice(&v.to_be_bytes());
    }
    while out.len() % BLOCK != 0 {
        out.push(0);
    }
}

/// Serializes `images` as 64-bit float HDUs. The first image becomes the
/// primary HDU unless `empty_primary` is set, in which case all images
/// are written as named `IMAGE` extensions after a header-only primary.
pub fn write_images(primary_extra: &Header, images: &[(&str, &Grid)], empty_primary: bool) -> Vec<u8> {
    let mut out = Vec::new();
    let emit = |out: &mut Vec<u8>, primary: bool, name: Option<&str>, grid: Option<&Grid>, extra: Option<&Header>| {
        if primary {
            push_card(out, "SIMPLE", &HeaderValue::Bool(true));
        } else {
            push_card(out, "XTENSION", &HeaderValue::Str("IMAGE".into()));
        }
        push_card(out, "BITPIX", &HeaderValue::Int(-64));
        match grid {
            Some(g) => {
                push_card(out, "NAXIS", &HeaderValue::Int(2));
                push_card(out, "NAXIS1", &HeaderValue::Int(g.width() as i64));
                push_card(out, "NAXIS2", &HeaderValue::Int(g.height() as i64));
            }
            None => push_card(out, "NAXIS", &HeaderValue::Int(0)),
        }
        if primary {
            push_card(out, "EXTEND", &HeaderValue::Bool(true));
        } else {
            push_card(out, "PCOUNT", &HeaderValue::Int(0));
            push_card(out, "GCOUNT", &HeaderValue::Int(1));
        }
        if let Some(name) = name {
            push_card(out, "EXTNAME", &HeaderValue::Str(name.into()));
        }
        if let Some(extra) = extra {
            for (k, v) in extra.cards() {
                push_card(out, k, v);
            }
        }
        finish_header(out);
        if let Some(g) = grid {
            push_data(out, g);
        }
    };
    let mut rest = images;
    if empty_primary || images.is_empty() {
        emit(&mut out, true, None, None, Some(primary_extra));
    } else {
        let (name, grid) = images[0];
        emit(&mut out, true, Some(name), Some(grid), Some(primary_extra));
        rest = &images[1..];
    }
    for (name, grid) in rest {
        emit(&mut out, false, Some(name), Some(grid), None);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn long_strings_survive_a_round_trip() {
        let text = format!("{{\"path\": \"it's here \", \"x\": \"{}\"}}", "ab ".repeat(60));
        let mut h = Header::default();
        h.set_long_string("PROV", &text).unwrap();
        assert!(h.cards().len() > 1);
        let bytes = write_images(&h, &[("A", &Grid::zeros(1, 1))], true);
        let (back, _) = read_first_image(&bytes).unwrap();
        assert_eq!(back.long_string("PROV").unwrap(), text);
        assert!(h.set_long_string("PROV", "caf\u{e9}").is_err());
        assert!(Header::default().long_string("PROV").is_none());
    }

    fn table_hdu(zimage: bool) -> Vec<u8> {
        let mut out = Vec::new();
        for (k, v) in [
            ("XTENSION", HeaderValue::Str("BINTABLE".into())),
            ("BITPIX", HeaderValue::Int(8)),
            ("NAXIS", HeaderValue::Int(2)),
            ("NAXIS1", HeaderValue::Int(8)),
            ("NAXIS2", HeaderValue::Int(4)),
            ("PCOUNT", HeaderValue::Int(3000)),
            ("GCOUNT", HeaderValue::Int(1)),
            ("TFIELDS", HeaderValue::Int(1)),
            ("ZIMAGE", HeaderValue::Bool(zimage)),
        ] {
            push_card(&mut out, k, &v);
        }
        finish_header(&mut out);
        out.resize(out.len() + (32 + 3000usize).div_ceil(BLOCK) * BLOCK, 0);
        out
    }

    #[test]
    fn tables_are_skipped_and_compressed_images_rejected() {
        let a = Grid::from_fn(2, 3, |r, c| (r * 3 + c) as f64);
        let image = write_images(&Header::default(), &[("A", &a)], true);
        // Empty primary, a table with a heap, then the image extension.
        let primary_len = image.len() - 2 * BLOCK;
        let mut bytes = image[..primary_len].to_vec();
        bytes.extend(table_hdu(false));
        bytes.extend_from_slice(&image[primary_len..]);
        let hdus = read_hdus(&bytes).unwrap();
        assert_eq!(hdus.len(), 3);
        assert!(hdus[1].data.is_none());
        assert_eq!(read_first_image(&bytes).unwrap().1, a);

        let mut compressed = image[..primary_len].to_vec();
        compressed.extend(table_hdu(true));
        let err = read_hdus(&compressed).unwrap_err().to_string();
        assert!(err.contains("tile-compressed"), "{err}");
    }

    #[test]
    fn round_trip_multi_extension() {
        let a = Grid::from_fn(3, 5, |r, c| r as f64 * 1.5 - c as f64);
        let b = Grid::filled(2, 2, f64::NAN);
        let mut extra = Header::default();
        extra.set("DATE-OBS", HeaderValue::Str("2014-03-01T00:00:00".into()));
        extra.set("NSAMPLES", HeaderValue::Int(50));
        let bytes = write_images(&extra, &[("MEAN", &a), ("EPISTEMIC", &b)], true);
        assert_eq!(bytes.len() % BLOCK, 0);
        let hdus = read_hdus(&bytes).unwrap();
        assert_eq!(hdus.len(), 3);
        assert!(hdus[0].data.is_none());
        assert_eq!(hdus[0].header.get("NSAMPLES"), Some(&HeaderValue::Int(50)));
        assert_eq!(hdus[1].name(), Some("MEAN"));
        assert_eq!(hdus[1].data.as_ref().unwrap(), &a);
        assert!(hdus[2].data.as_ref().unwrap().as_slice()[0].is_nan());

        let (h, g) = read_first_image(&bytes).unwrap();
        assert_eq!(g, a);
        assert_eq!(h.get("DATE-OBS").unwrap().as_str(), Some("2014-03-01T00:00:00"));
    }

    #[test]
    fn scaled_integer_data() {
        let mut bytes = Vec::new();
        push_card(&mut bytes, "SIMPLE", &HeaderValue::Bool(true));
        push_card(&mut bytes, "BITPIX", &HeaderValue::Int(16));
        push_card(&mut bytes, "NAXIS", &HeaderValue::Int(2));
        push_card(&mut bytes, "NAXIS1", &HeaderValue::Int(2));
        push_card(&mut bytes, "NAXIS2", &HeaderValue::Int(1));
        push_card(&mut bytes, "BSCALE", &HeaderValue::Float(0.5));
        push_card(&mut bytes, "BZERO", &HeaderValue::Float(10.0));
        push_card(&mut bytes, "BLANK", &HeaderValue::Int(-32768));
        finish_header(&mut bytes);
        bytes.extend_from_slice(&4i16.to_be_bytes());
        bytes.extend_from_slice(&(-32768i16).to_be_bytes());
        bytes.resize(2 * BLOCK, 0);
        let (_, g) = read_first_image(&bytes).unwrap();
        assert_eq!(g.as_slice()[0], 12.0);
        assert!(g.as_slice()[1].is_nan());
    }

    #[test]
    fn truncated_data_is_corrupt() {
        let g = Grid::zeros(40, 40);
        let bytes = write_images(&Header::default(), &[("X", &g)], false);
        let err = read_hdus(&bytes[..bytes.len() - BLOCK]).unwrap_err();
        assert!(err.is_io());
        assert!(read_hdus(b"hello").unwrap_err().is_io());
    }

    #[test]
    fn string_values_with_quotes_and_comments() {
        assert_eq!(parse_value(" 'O''Brien '  / who"), HeaderValue::Str("O'Brien".into()));
        assert_eq!(parse_value("   1.5D2 / c"), HeaderValue::Float(150.0));
        assert_eq!(parse_value("  T"), HeaderValue::Bool(true));
    }
}
