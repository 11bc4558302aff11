//! ESRI ASCII grid and PPM input/output, plus scene alignment.
//!
//! Every raster in the pipeline (DEM, spectral bands, label maps, class maps,
//! marginal maps) is a [`Grid`]: a georeferenced row-major array of `f64`
//! whose first row is the northernmost. A cell is invalid when its stored bits
//! equal the bits of `nodata_value`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

/// NODATA value assumed when the header omits `NODATA_value`.
pub const DEFAULT_NODATA: f64 = -9999.0;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid grid: {0}")]
    Invalid(String),
    #[error("{first} and {second} are not aligned (differing: {fields})")]
    Alignment {
        first: String,
        second: String,
        fields: String,
    },
    #[error("{name}: cell {index} has value {value}, expected 0, 1 or nodata")]
    BadClass {
        name: String,
        index: usize,
        value: f64,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: Box<RasterError>,
    },
}

pub type Result<T> = std::result::Result<T, RasterError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub ncols: usize,
    pub nrows: usize,
    pub xllcorner: f64,
    pub yllcorner: f64,
    pub cellsize: f64,
    pub nodata_value: f64,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn new(
        ncols: usize,
        nrows: usize,
        xllcorner: f64,
        yllcorner: f64,
        cellsize: f64,
        nodata_value: f64,
        values: Vec<f64>,
    ) -> Result<Self> {
        let grid = Self {
            ncols,
            nrows,
            xllcorner,
            yllcorner,
            cellsize,
            nodata_value,
            values,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// A grid at the origin with unit cells and the default NODATA value.
    pub fn from_values(nrows: usize, ncols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(ncols, nrows, 0.0, 0.0, 1.0, DEFAULT_NODATA, values)
    }

    /// A grid with the same geometry as `self`, filled with `value`.
    pub fn filled_like(&self, value: f64) -> Self {
        Self {
            values: vec![value; self.len()],
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ncols == 0 || self.nrows == 0 {
            return Err(RasterError::Invalid(format!(
                "dimensions must be positive, got {}x{}",
                self.nrows, self.ncols
            )));
        }
        if !(self.cellsize > 0.0) {
            return Err(RasterError::Invalid(format!(
                "cellsize must be positive, got {}",
                self.cellsize
            )));
        }
        if self.values.len() != self.ncols * self.nrows {
            return Err(RasterError::Invalid(format!(
                "expected {} values, got {}",
                self.ncols * self.nrows,
                self.values.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.ncols + col
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[self.index(row, col)]
    }

    #[inline]
    pub fn is_nodata(&self, value: f64) -> bool {
        value.to_bits() == self.nodata_value.to_bits()
    }

    #[inline]
    pub fn is_valid_at(&self, index: usize) -> bool {
        !self.is_nodata(self.values[index])
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|&&v| !self.is_nodata(v)).count()
    }

    /// Names of the geometry fields that differ between two grids.
    pub fn geometry_diff(&self, other: &Grid) -> Vec<&'static str> {
        let mut diff = Vec::new();
        if self.ncols != other.ncols {
            diff.push("ncols");
        }
        if self.nrows != other.nrows {
            diff.push("nrows");
        }
        if self.xllcorner.to_bits() != other.xllcorner.to_bits() {
            diff.push("xllcorner");
        }
        if self.yllcorner.to_bits() != other.yllcorner.to_bits() {
            diff.push("yllcorner");
        }
        if self.cellsize.to_bits() != other.cellsize.to_bits() {
            diff.push("cellsize");
        }
        diff
    }

    pub fn same_geometry(&self, other: &Grid) -> bool {
        self.geometry_diff(other).is_empty()
    }

    /// Check that every cell is 0, 1 or nodata.
    pub fn check_binary(&self, name: &str) -> Result<()> {
        for (index, &value) in self.values.iter().enumerate() {
            if !(self.is_nodata(value) || value == 0.0 || value == 1.0) {
                return Err(RasterError::BadClass {
                    name: name.to_string(),
                    index,
                    value,
                });
            }
        }
        Ok(())
    }
}

fn check_aligned(first: &str, a: &Grid, second: &str, b: &Grid) -> Result<()> {
    let diff = a.geometry_diff(b);
    if diff.is_empty() {
        Ok(())
    } else {
        Err(RasterError::Alignment {
            first: first.to_string(),
            second: second.to_string(),
            fields: diff.join(", "),
        })
    }
}

fn format_number(out: &mut String, v: f64) {
    // Display already prints integral floats without a decimal point and
    // everything else as the shortest string that parses back to the same bits.
    let _ = write!(out, "{v}");
}

/// Parse an ESRI ASCII grid.
pub fn parse_ascii_grid(text: &[u8]) -> Result<Grid> {
    let text = std::str::from_utf8(text).map_err(|e| RasterError::Parse {
        line: 1 + text[..e.valid_up_to()]
            .iter()
            .filter(|&&b| b == b'\n')
            .count(),
        message: "input is not valid UTF-8".into(),
    })?;

    let mut ncols = None;
    let mut nrows = None;
    let mut xll = None;
    let mut yll = None;
    let mut cellsize = None;
    let mut nodata = None;

    let mut lines = text.lines().enumerate().peekable();
    while let Some(&(idx, line)) = lines.peek() {
        let lineno = idx + 1;
        let mut tokens = line.split_whitespace();
        let Some(key) = tokens.next() else {
            lines.next();
            continue;
        };
        if !key.starts_with(|c: char| c.is_ascii_alphabetic()) || is_numeric_token(key) {
            break;
        }
        let value = tokens.next().ok_or_else(|| RasterError::Parse {
            line: lineno,
            message: format!("header key {key:?} has no value"),
        })?;
        if let Some(extra) = tokens.next() {
            return Err(RasterError::Parse {
                line: lineno,
                message: format!("unexpected token {extra:?} after header value"),
            });
        }
        let real = || {
            value.parse::<f64>().map_err(|_| RasterError::Parse {
                line: lineno,
                message: format!("header {key:?} has non-numeric value {value:?}"),
            })
        };
        let count = || {
            value.parse::<usize>().map_err(|_| RasterError::Parse {
                line: lineno,
                message: format!("header {key:?} must be a non-negative integer, got {value:?}"),
            })
        };
        let slot_filled = match key.to_ascii_lowercase().as_str() {
            "ncols" => ncols.replace(count()?).is_some(),
            "nrows" => nrows.replace(count()?).is_some(),
            "xllcorner" => xll.replace(real()?).is_some(),
            "yllcorner" => yll.replace(real()?).is_some(),
            "cellsize" => cellsize.replace(real()?).is_some(),
            "nodata_value" => nodata.replace(real()?).is_some(),
            _ => {
                return Err(RasterError::Parse {
                    line: lineno,
                    message: format!("unknown header key {key:?}"),
                })
            }
        };
        if slot_filled {
            return Err(RasterError::Parse {
                line: lineno,
                message: format!("duplicate header key {key:?}"),
            });
        }
        lines.next();
    }

    let header_end = lines
        .peek()
        .map_or(text.lines().count() + 1, |&(i, _)| i + 1);
    let missing = |name: &str| RasterError::Parse {
        line: header_end,
        message: format!("missing header key {name}"),
    };
    let ncols = ncols.ok_or_else(|| missing("ncols"))?;
    let nrows = nrows.ok_or_else(|| missing("nrows"))?;
    let xllcorner = xll.ok_or_else(|| missing("xllcorner"))?;
    let yllcorner = yll.ok_or_else(|| missing("yllcorner"))?;
    let cellsize = cellsize.ok_or_else(|| missing("cellsize"))?;
    let nodata_value = nodata.unwrap_or(DEFAULT_NODATA);

    let expected = ncols.checked_mul(nrows).ok_or_else(|| RasterError::Parse {
        line: header_end,
        message: "grid dimensions overflow".into(),
    })?;
    let mut values = Vec::with_capacity(expected.min(1 << 26));
    let mut last_line = header_end;
    for (idx, line) in lines {
        let lineno = idx + 1;
        for token in line.split_whitespace() {
            last_line = lineno;
            let v = token.parse::<f64>().map_err(|_| RasterError::Parse {
                line: lineno,
                message: format!("non-numeric cell value {token:?}"),
            })?;
            if values.len() == expected {
                return Err(RasterError::Parse {
                    line: lineno,
                    message: format!("more than the expected {expected} cell values"),
                });
            }
            values.push(v);
        }
    }
    if values.len() != expected {
        return Err(RasterError::Parse {
            line: last_line,
            message: format!("expected {expected} cell values, found {}", values.len()),
        });
    }

    Grid::new(
        ncols,
        nrows,
        xllcorner,
        yllcorner,
        cellsize,
        nodata_value,
        values,
    )
    .map_err(|e| RasterError::Parse {
        line: 1,
        message: e.to_string(),
    })
}

fn is_numeric_token(token: &str) -> bool {
    token.parse::<f64>().is_ok()
}

/// Serialize a grid in canonical form, so that `write(parse(write(g)))` is
/// byte-identical to `write(g)`.
pub fn write_ascii_grid(grid: &Grid) -> Vec<u8> {
    let mut out = String::with_capacity(64 + grid.len() * 8);
    let _ = writeln!(out, "ncols {}", grid.ncols);
    let _ = writeln!(out, "nrows {}", grid.nrows);
    out.push_str("xllcorner ");
    format_number(&mut out, grid.xllcorner);
    out.push_str("\nyllcorner ");
    format_number(&mut out, grid.yllcorner);
    out.push_str("\ncellsize ");
    format_number(&mut out, grid.cellsize);
    out.push_str("\nNODATA_value ");
    format_number(&mut out, grid.nodata_value);
    out.push('\n');
    for row in grid.values.chunks(grid.ncols) {
        for (i, &v) in row.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            format_number(&mut out, v);
        }
        out.push('\n');
    }
    out.into_bytes()
}

pub fn read_grid_file(path: impl AsRef<Path>) -> Result<Grid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| RasterError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_ascii_grid(&bytes).map_err(|e| RasterError::File {
        path: path.display().to_string(),
        source: Box::new(e),
    })
}

pub fn write_grid_file(path: impl AsRef<Path>, grid: &Grid) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_ascii_grid(grid)).map_err(|source| RasterError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// RGB colours used when rendering a class map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Palette {
    pub dry: [u8; 3],
    pub flood: [u8; 3],
    pub nodata: [u8; 3],
}

impl Default for Palette {
    fn default() -> Self {
        Self {
            dry: [165, 120, 80],
            flood: [60, 100, 200],
            nodata: [0, 0, 0],
        }
    }
}

/// Render a class map (0 = dry, 1 = flood) as a binary P6 pixmap.
pub fn write_ppm(class_map: &Grid, palette: &Palette) -> Result<Vec<u8>> {
    let header = format!("P6\n{} {}\n255\n", class_map.ncols, class_map.nrows);
    let mut out = Vec::with_capacity(header.len() + 3 * class_map.len());
    out.extend_from_slice(header.as_bytes());
    for (index, &v) in class_map.values.iter().enumerate() {
        let rgb = if class_map.is_nodata(v) {
            palette.nodata
        } else if v == 0.0 {
            palette.dry
        } else if v == 1.0 {
            palette.flood
        } else {
            return Err(RasterError::BadClass {
                name: "class map".into(),
                index,
                value: v,
            });
        };
        out.extend_from_slice(&rgb);
    }
    Ok(out)
}

/// A DEM, an ordered feature stack and optional labels sharing one geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub dem: Grid,
    pub bands: Vec<Grid>,
    pub labels: Option<Grid>,
}

impl SceneBundle {
    pub fn new(dem: Grid, bands: Vec<Grid>, labels: Option<Grid>) -> Result<Self> {
        let band_names: Vec<String> = (0..bands.len()).map(|i| format!("band {i}")).collect();
        let band_refs: Vec<&str> = band_names.iter().map(String::as_str).collect();
        Self::with_names(dem, "dem", bands, &band_refs, labels, "labels")
    }

    fn with_names(
        dem: Grid,
        dem_name: &str,
        bands: Vec<Grid>,
        band_names: &[&str],
        labels: Option<Grid>,
        label_name: &str,
    ) -> Result<Self> {
        if bands.is_empty() {
            return Err(RasterError::Invalid(
                "a scene needs at least one band".into(),
            ));
        }
        dem.validate()?;
        for (band, name) in bands.iter().zip(band_names) {
            band.validate()?;
            check_aligned(dem_name, &dem, name, band)?;
        }
        // Pairwise equality is transitive, but name the band pair if it is the
        // bands that disagree with each other and not with the DEM.
        for i in 1..bands.len() {
            check_aligned(band_names[0], &bands[0], band_names[i], &bands[i])?;
        }
        if let Some(labels) = &labels {
            labels.validate()?;
            check_aligned(dem_name, &dem, label_name, labels)?;
            labels.check_binary(label_name)?;
        }
        Ok(Self { dem, bands, labels })
    }

    pub fn nrows(&self) -> usize {
        self.dem.nrows
    }

    pub fn ncols(&self) -> usize {
        self.dem.ncols
    }

    pub fn band_count(&self) -> usize {
        self.bands.len()
    }

    /// A pixel is valid when the DEM and every band carry data there.
    pub fn is_valid(&self, index: usize) -> bool {
        self.dem.is_valid_at(index) && self.bands.iter().all(|b| b.is_valid_at(index))
    }

    pub fn valid_count(&self) -> usize {
        (0..self.dem.len()).filter(|&i| self.is_valid(i)).count()
    }

    /// The DEM with every invalid scene pixel set to nodata.
    pub fn masked_dem(&self) -> Grid {
        let mut dem = self.dem.clone();
        for i in 0..dem.len() {
            if !self.is_valid(i) {
                dem.values[i] = dem.nodata_value;
            }
        }
        dem
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.as_ref().map_or(0, |l| {
            (0..l.len())
                .filter(|&i| self.is_valid(i) && l.is_valid_at(i))
                .count()
        })
    }

    /// Feature vector of one pixel, in band order.
    pub fn feature(&self, index: usize) -> Vec<f64> {
        self.bands.iter().map(|b| b.values[index]).collect()
    }
}

/// Read a DEM, its bands and optional labels from disk and check alignment.
pub fn load_scene<P: AsRef<Path>>(
    dem_path: P,
    band_paths: &[P],
    label_path: Option<P>,
) -> Result<SceneBundle> {
    let dem = read_grid_file(&dem_path)?;
    let bands = band_paths
        .iter()
        .map(read_grid_file)
        .collect::<Result<Vec<_>>>()?;
    let labels = label_path.as_ref().map(read_grid_file).transpose()?;
    let dem_name = dem_path.as_ref().display().to_string();
    let band_names: Vec<String> = band_paths
        .iter()
        .map(|p| p.as_ref().display().to_string())
        .collect();
    let band_refs: Vec<&str> = band_names.iter().map(String::as_str).collect();
    let label_name = label_path
        .as_ref()
        .map(|p| p.as_ref().display().to_string())
        .unwrap_or_default();
    SceneBundle::with_names(dem, &dem_name, bands, &band_refs, labels, &label_name)
}
