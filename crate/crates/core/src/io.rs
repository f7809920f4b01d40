//! File formats.
//!
//! Cubes and per-pixel fields share one container: a text header opened by
//! the magic line `CSUCUBE1` and closed by `end`, then `8 * bands * N` bytes
//! of little-endian `f64`, band-major, pixels in column-major grid order.
//! Libraries are CSV with a header row of names and one row per band.
//! Rendered maps are binary PGM (P5) with a text sidecar holding the scale.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{CsuError, Result};
use crate::types::{AbundanceField, BinaryMap, GridGeometry, HyperCube, Library};

pub const CUBE_MAGIC: &str = "CSUCUBE1";

/// What a container file holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    /// Observed spectra, one row per band.
    Cube,
    /// Abundance values, one row per endmember.
    Abundance,
    /// 0/1 labels, one row per endmember.
    Support,
    /// Presence probabilities, one row per endmember.
    Presence,
    /// Active endmember count, single row.
    Count,
}

impl FieldKind {
    pub fn name(self) -> &'static str {
        match self {
            FieldKind::Cube => "cube",
            FieldKind::Abundance => "abundance",
            FieldKind::Support => "support",
            FieldKind::Presence => "presence",
            FieldKind::Count => "count",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "cube" => FieldKind::Cube,
            "abundance" => FieldKind::Abundance,
            "support" => FieldKind::Support,
            "presence" => FieldKind::Presence,
            "count" => FieldKind::Count,
            other => return Err(CsuError::Io(format!("unknown field kind '{other}'"))),
        })
    }
}

/// A decoded container.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub kind: FieldKind,
    pub geom: GridGeometry,
    /// `bands x N`.
    pub data: DMatrix<f64>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CsuError {
    CsuError::Io(format!("{}: {e}", path.display()))
}

pub fn encode_field(kind: FieldKind, geom: GridGeometry, data: &DMatrix<f64>) -> Result<Vec<u8>> {
    if data.ncols() != geom.n_pixels() {
        return Err(CsuError::arg("field width does not match the grid"));
    }
    let mut out = format!(
        "{CUBE_MAGIC}\nkind = {}\nbands = {}\nrows = {}\ncols = {}\ndtype = float64\nbyteorder = little\nend\n",
        kind.name(),
        data.nrows(),
        geom.n_row(),
        geom.n_col()
    )
    .into_bytes();
    out.reserve(8 * data.len());
    for row in data.row_iter() {
        for v in row.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_field(mut reader: impl BufRead) -> Result<Field> {
    let mut line = String::new();
    let mut next_line = |line: &mut String| -> Result<String> {
        line.clear();
        if reader.read_line(line)? == 0 {
            return Err(CsuError::Io("unexpected end of header".into()));
        }
        Ok(line.trim_end_matches(['\n', '\r']).to_string())
    };
    if next_line(&mut line)? != CUBE_MAGIC {
        return Err(CsuError::Io(format!("missing {CUBE_MAGIC} magic")));
    }
    let (mut kind, mut bands, mut rows, mut cols) = (None, None, None, None);
    loop {
        let l = next_line(&mut line)?;
        if l == "end" {
            break;
        }
        let (k, v) = l
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| CsuError::Io(format!("bad header line '{l}'")))?;
        let num = |v: &str| v.parse::<usize>().map_err(|_| CsuError::Io(format!("bad value for {k}: '{v}'")));
        match k {
            "kind" => kind = Some(FieldKind::parse(v)?),
            "bands" => bands = Some(num(v)?),
            "rows" => rows = Some(num(v)?),
            "cols" => cols = Some(num(v)?),
            "dtype" if v == "float64" => {}
            "byteorder" if v == "little" => {}
            "dtype" | "byteorder" => return Err(CsuError::Io(format!("unsupported {k} '{v}'"))),
            _ => return Err(CsuError::Io(format!("unknown header key '{k}'"))),
        }
    }
    let missing = |what: &str| CsuError::Io(format!("header lacks '{what}'"));
    let kind = kind.ok_or_else(|| missing("kind"))?;
    let bands = bands.ok_or_else(|| missing("bands"))?;
    let geom = GridGeometry::new(rows.ok_or_else(|| missing("rows"))?, cols.ok_or_else(|| missing("cols"))?)
        .map_err(|e| CsuError::Io(e.to_string()))?;
    let n = geom.n_pixels();
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    if payload.len() != 8 * bands * n {
        return Err(CsuError::Io(format!(
            "payload has {} bytes, header implies {}",
            payload.len(),
            8 * bands * n
        )));
    }
    let mut data = DMatrix::zeros(bands, n);
    for (i, chunk) in payload.chunks_exact(8).enumerate() {
        data[(i / n, i % n)] = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
    }
    Ok(Field { kind, geom, data })
}

pub fn write_field(path: &Path, kind: FieldKind, geom: GridGeometry, data: &DMatrix<f64>) -> Result<()> {
    fs::write(path, encode_field(kind, geom, data)?).map_err(|e| io_err(path, e))
}

pub fn read_field(path: &Path) -> Result<Field> {
    let f = fs::File::open(path).map_err(|e| io_err(path, e))?;
    decode_field(BufReader::new(f)).map_err(|e| match e {
        CsuError::Io(m) => io_err(path, m),
        other => other,
    })
}

fn expect_kind(path: &Path, field: &Field, kind: FieldKind) -> Result<()> {
    if field.kind != kind {
        return Err(io_err(path, format!("expected a {} file, found {}", kind.name(), field.kind.name())));
    }
    Ok(())
}

pub fn write_cube(path: &Path, cube: &HyperCube) -> Result<()> {
    write_field(path, FieldKind::Cube, cube.geometry(), cube.data())
}

pub fn read_cube(path: &Path) -> Result<HyperCube> {
    let f = read_field(path)?;
    expect_kind(path, &f, FieldKind::Cube)?;
    HyperCube::new(f.data, f.geom)
}

pub fn write_abundances(path: &Path, geom: GridGeometry, a: &AbundanceField) -> Result<()> {
    write_field(path, FieldKind::Abundance, geom, a.values())
}

pub fn read_abundances(path: &Path) -> Result<(GridGeometry, AbundanceField)> {
    let f = read_field(path)?;
    expect_kind(path, &f, FieldKind::Abundance)?;
    Ok((f.geom, AbundanceField::new(f.data)?))
}

pub fn write_support(path: &Path, geom: GridGeometry, z: &BinaryMap) -> Result<()> {
    write_field(path, FieldKind::Support, geom, &z.to_matrix())
}

pub fn read_support(path: &Path) -> Result<(GridGeometry, BinaryMap)> {
    let f = read_field(path)?;
    expect_kind(path, &f, FieldKind::Support)?;
    if f.data.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(io_err(path, "support entries must be 0 or 1"));
    }
    let z = BinaryMap::from_fn(f.data.nrows(), f.data.ncols(), |r, n| f.data[(r, n)] == 1.0)?;
    Ok((f.geom, z))
}

/// Library as CSV text: names, then one row per band.
pub fn encode_library_csv(lib: &Library) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CsuError::Io(e.to_string());
    w.write_record(lib.names()).map_err(err)?;
    for row in lib.data().row_iter() {
        w.write_record(row.iter().map(|v| format!("{v:?}"))).map_err(err)?;
    }
    w.into_inner().map_err(|e| CsuError::Io(e.to_string()))
}

pub fn decode_library_csv(reader: impl Read) -> Result<Library> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let err = |e: csv::Error| CsuError::Io(e.to_string());
    let names: Vec<String> = r.headers().map_err(err)?.iter().map(|s| s.trim().to_string()).collect();
    let mut values = Vec::new();
    let mut bands = 0;
    for rec in r.records() {
        let rec = rec.map_err(err)?;
        if rec.len() != names.len() {
            return Err(CsuError::Io(format!("library row {} has {} entries, expected {}", bands + 1, rec.len(), names.len())));
        }
        for cell in rec.iter() {
            values.push(
                cell.trim().parse::<f64>().map_err(|_| CsuError::Io(format!("bad number '{cell}' in library")))?,
            );
        }
        bands += 1;
    }
    if bands == 0 || names.is_empty() {
        return Err(CsuError::Io("library CSV is empty".into()));
    }
    Library::new(DMatrix::from_row_slice(bands, names.len(), &values), names)
}

pub fn write_library_csv(path: &Path, lib: &Library) -> Result<()> {
    fs::write(path, encode_library_csv(lib)?).map_err(|e| io_err(path, e))
}

pub fn read_library_csv(path: &Path) -> Result<Library> {
    let f = fs::File::open(path).map_err(|e| io_err(path, e))?;
    decode_library_csv(f)
}

/// Grey levels scaled linearly from `[lo, hi]` to `[0, 255]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GreyScale {
    pub lo: f64,
    pub hi: f64,
}

impl GreyScale {
    /// Range of the values; a constant map gets a unit-width range.
    pub fn fit(values: &[f64]) -> Self {
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(lo.is_finite() && hi.is_finite()) {
            return Self { lo: 0.0, hi: 1.0 };
        }
        Self { lo, hi: if hi > lo { hi } else { lo + 1.0 } }
    }

    pub fn level(&self, v: f64) -> u8 {
        (((v - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0) * 255.0).round() as u8
    }

    pub fn sidecar(&self) -> String {
        format!("min = {:?}\nmax = {:?}\n", self.lo, self.hi)
    }

    pub fn parse_sidecar(text: &str) -> Result<Self> {
        let mut lo = None;
        let mut hi = None;
        for line in text.lines() {
            let Some((k, v)) = line.split_once('=') else { continue };
            let v: f64 = v.trim().parse().map_err(|_| CsuError::Io(format!("bad sidecar value '{v}'")))?;
            match k.trim() {
                "min" => lo = Some(v),
                "max" => hi = Some(v),
                _ => {}
            }
        }
        match (lo, hi) {
            (Some(lo), Some(hi)) => Ok(Self { lo, hi }),
            _ => Err(CsuError::Io("sidecar needs min and max".into())),
        }
    }
}

/// P5 image of one field row, image rows are grid rows.
pub fn encode_pgm(geom: GridGeometry, values: &[f64], scale: GreyScale) -> Result<Vec<u8>> {
    if values.len() != geom.n_pixels() {
        return Err(CsuError::arg("map length does not match the grid"));
    }
    let mut out = format!("P5\n{} {}\n255\n", geom.n_col(), geom.n_row()).into_bytes();
    for row in 0..geom.n_row() {
        for col in 0..geom.n_col() {
            out.push(scale.level(values[geom.index(row, col)]));
        }
    }
    Ok(out)
}

/// Parses a P5 image written by [`encode_pgm`]; returns `(cols, rows, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(CsuError::Io("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(CsuError::Io("only 8-bit P5 images are supported".into()));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| CsuError::Io(format!("bad PGM size '{s}'")));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let pixels = bytes.get(pos..).unwrap_or_default().to_vec();
    if pixels.len() != w * h {
        return Err(CsuError::Io("PGM payload size mismatch".into()));
    }
    Ok((w, h, pixels))
}

/// Scale used to render a map of the given kind.
///
/// Labels map 0/1 to 0/255, counts map `[0, n_endmembers]`, anything else is
/// fitted to its own range.
pub fn render_scale(kind: FieldKind, values: &[f64], n_endmembers: usize) -> GreyScale {
    match kind {
        FieldKind::Support | FieldKind::Presence => GreyScale { lo: 0.0, hi: 1.0 },
        FieldKind::Count => GreyScale { lo: 0.0, hi: n_endmembers.max(1) as f64 },
        FieldKind::Cube | FieldKind::Abundance => GreyScale::fit(values),
    }
}

/// Writes one `<stem>_<row>.pgm` (and `.scale` sidecar) per field row.
/// Returns the image paths.
pub fn render_field(field: &Field, out_dir: &Path, stem: &str, n_endmembers: usize) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let mut paths = Vec::new();
    for (i, row) in field.data.row_iter().enumerate() {
        let values: Vec<f64> = row.iter().copied().collect();
        let scale = render_scale(field.kind, &values, n_endmembers);
        let img = out_dir.join(format!("{stem}_{i}.pgm"));
        let side = out_dir.join(format!("{stem}_{i}.scale"));
        let mut f = fs::File::create(&img).map_err(|e| io_err(&img, e))?;
        f.write_all(&encode_pgm(field.geom, &values, scale)?).map_err(|e| io_err(&img, e))?;
        fs::write(&side, scale.sidecar()).map_err(|e| io_err(&side, e))?;
        paths.push(img);
    }
    Ok(paths)
}
