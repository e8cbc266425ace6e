//! File formats: point CSV (`x,y` header) and 8-bit binary PGM/PPM.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{GridDomain, Point, PointSet, ProbMap, RgbImage};

#[derive(Serialize, Deserialize)]
struct Row {
    x: f64,
    y: f64,
}

pub fn write_points_csv<W: Write>(points: &PointSet, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    // csv only emits the header on the first record; write it explicitly so
    // an empty set still produces a valid file.
    w.write_record(["x", "y"])?;
    for p in points {
        w.write_record([p.x.to_string(), p.y.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_points_csv<R: Read>(input: R) -> Result<PointSet> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["x", "y"] {
        return Err(Error::Format(format!("expected header `x,y`, got {headers:?}")));
    }
    let mut points = Vec::new();
    for row in r.deserialize() {
        let Row { x, y } = row?;
        points.push(Point::new(x, y));
    }
    PointSet::new(points)
}

pub fn save_points_csv(points: &PointSet, path: impl AsRef<Path>) -> Result<()> {
    write_points_csv(points, BufWriter::new(File::create(path)?))
}

pub fn load_points_csv(path: impl AsRef<Path>) -> Result<PointSet> {
    read_points_csv(File::open(path)?)
}

fn to_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn encode_pnm<W: Write>(out: W, bytes: &[u8], dom: GridDomain, color: ExtendedColorType) -> Result<()> {
    let subtype = match color {
        ExtendedColorType::L8 => PnmSubtype::Graymap(SampleEncoding::Binary),
        _ => PnmSubtype::Pixmap(SampleEncoding::Binary),
    };
    PnmEncoder::new(out).with_subtype(subtype).write_image(
        bytes,
        dom.width as u32,
        dom.height as u32,
        color,
    )?;
    Ok(())
}

/// Writes a grayscale map (values in `[0, 1]`) as binary PGM.
pub fn write_pgm<W: Write>(values: &[f64], dom: GridDomain, out: W) -> Result<()> {
    if values.len() != dom.len() {
        return Err(Error::Shape("pgm buffer does not match domain".into()));
    }
    let bytes: Vec<u8> = values.iter().map(|&v| to_byte(v)).collect();
    encode_pnm(out, &bytes, dom, ExtendedColorType::L8)
}

pub fn save_pgm(map: &ProbMap, path: impl AsRef<Path>) -> Result<()> {
    write_pgm(map.values(), map.domain(), BufWriter::new(File::create(path)?))
}

pub fn write_ppm<W: Write>(img: &RgbImage, out: W) -> Result<()> {
    let n = img.domain().len();
    let mut bytes = Vec::with_capacity(3 * n);
    for i in 0..n {
        for c in 0..3 {
            bytes.push(to_byte(img.channel(c)[i]));
        }
    }
    encode_pnm(out, &bytes, img.domain(), ExtendedColorType::Rgb8)
}

pub fn save_ppm(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ppm(img, &mut w)?;
    w.flush()?;
    Ok(())
}

fn decode_pnm(bytes: &[u8]) -> Result<DynamicImage> {
    Ok(image::load_from_memory_with_format(bytes, image::ImageFormat::Pnm)?)
}

pub fn read_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let img = decode_pnm(bytes)?.into_rgb8();
    let dom = GridDomain::new(img.width() as usize, img.height() as usize)?;
    let mut channels: [Vec<f64>; 3] = Default::default();
    for px in img.pixels() {
        for c in 0..3 {
            channels[c].push(px.0[c] as f64 / 255.0);
        }
    }
    RgbImage::new(dom, channels)
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    read_ppm(&std::fs::read(path)?)
}

pub fn read_pgm(bytes: &[u8]) -> Result<ProbMap> {
    let img = decode_pnm(bytes)?.into_luma8();
    let dom = GridDomain::new(img.width() as usize, img.height() as usize)?;
    ProbMap::new(dom, img.pixels().map(|p| p.0[0] as f64 / 255.0).collect())
}
