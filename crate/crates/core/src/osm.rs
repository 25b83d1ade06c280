//! OpenStreetMap XML ingestion and radius queries.
//!
//! Only the `<node>`, `<way>`, `<nd>` and `<tag>` subset of the format is
//! consumed. Relations are recognized and counted but contribute neither
//! geometry nor labels.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use thiserror::Error;

use crate::geo::{enu_distance, enu_from_validated, meters_per_degree, EnuPoint, GeoPoint};

#[derive(Debug, Error)]
pub enum OsmError {
    #[error("malformed OSM XML at line {line}: {message}")]
    Xml { line: usize, message: String },
    #[error("invalid attribute at line {line}: {message}")]
    Attribute { line: usize, message: String },
    #[error("element store: {0}")]
    Store(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ElementKind {
    Node,
    Way,
}

/// A labeled map object with its geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct OsmElement {
    pub id: i64,
    pub kind: ElementKind,
    pub label: String,
    pub geometry: Vec<GeoPoint>,
    pub tags: BTreeMap<String, String>,
}

/// Counters for input the parser skipped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseReport {
    /// Ways dropped because a referenced node was absent from the document.
    pub ways_missing_nodes: usize,
    /// Ways with fewer than two resolvable vertices.
    pub degenerate_ways: usize,
    /// Tagged nodes or ways with no semantic label.
    pub unlabeled: usize,
    pub relations_skipped: usize,
}

/// Keys consulted for a label, in priority order.
pub const LABEL_KEYS: [&str; 9] = [
    "amenity", "shop", "leisure", "highway", "natural", "landuse", "building", "barrier", "waterway",
];

const VAGUE_VALUES: [&str; 2] = ["yes", "true"];

fn is_vague(value: &str) -> bool {
    VAGUE_VALUES.iter().any(|v| value.eq_ignore_ascii_case(v))
}

fn title_case(raw: &str) -> String {
    let words: Vec<String> = raw
        .split(|c: char| c == '_' || c.is_whitespace())
        .filter(|w| !w.is_empty())
        .map(|w| {
            let mut chars = w.chars();
            match chars.next() {
                Some(first) => first.to_uppercase().chain(chars.flat_map(char::to_lowercase)).collect(),
                None => String::new(),
            }
        })
        .collect();
    let mut label = words.join(" ");
    // A trailing integer token would read as a duplicate identifier in text
    // descriptions ("Level 2"), so it is fused onto the preceding word.
    if let Some(pos) = label.rfind(' ') {
        if label[pos + 1..].chars().all(|c| c.is_ascii_digit()) {
            label.replace_range(pos..pos + 1, "-");
        }
    }
    label
}

fn first_value(value: &str) -> &str {
    value.split(';').next().unwrap_or("").trim()
}

/// Resolve a human-readable label from an element's tags.
///
/// The first key of [`LABEL_KEYS`] present wins. Vague values ("yes") are
/// replaced by `<key>:use` / `<key>:type` when available, otherwise by the
/// key name itself.
pub fn label_for_element(tags: &BTreeMap<String, String>) -> Option<String> {
    for key in LABEL_KEYS {
        let Some(raw) = tags.get(key) else { continue };
        let value = first_value(raw);
        if value.is_empty() || value.eq_ignore_ascii_case("no") {
            continue;
        }
        if !is_vague(value) {
            return Some(title_case(value));
        }
        let secondary = [format!("{key}:use"), format!("{key}:type")]
            .into_iter()
            .filter_map(|k| tags.get(&k))
            .map(|v| first_value(v))
            .find(|v| !v.is_empty() && !is_vague(v));
        return Some(title_case(secondary.unwrap_or(key)));
    }
    None
}

enum Pending {
    None,
    Node { id: i64, point: GeoPoint, tags: BTreeMap<String, String> },
    Way { id: i64, refs: Vec<i64>, tags: BTreeMap<String, String> },
    Relation,
}

struct RawWay {
    id: i64,
    refs: Vec<i64>,
    tags: BTreeMap<String, String>,
}

fn line_of(bytes: &[u8], pos: u64) -> usize {
    let end = (pos as usize).min(bytes.len());
    1 + bytes[..end].iter().filter(|&&b| b == b'\n').count()
}

fn attrs(e: &BytesStart<'_>, line: usize) -> Result<HashMap<String, String>, OsmError> {
    let mut out = HashMap::new();
    for attr in e.attributes() {
        let attr = attr.map_err(|err| OsmError::Xml {
            line,
            message: err.to_string(),
        })?;
        let key = String::from_utf8_lossy(attr.key.as_ref()).into_owned();
        let value = attr
            .unescape_value()
            .map_err(|err| OsmError::Xml {
                line,
                message: err.to_string(),
            })?
            .into_owned();
        out.insert(key, value);
    }
    Ok(out)
}

fn required<T: std::str::FromStr>(
    map: &HashMap<String, String>,
    key: &str,
    element: &str,
    line: usize,
) -> Result<T, OsmError> {
    let raw = map.get(key).ok_or_else(|| OsmError::Attribute {
        line,
        message: format!("<{element}> missing `{key}`"),
    })?;
    raw.parse().map_err(|_| OsmError::Attribute {
        line,
        message: format!("<{element}> has unparsable `{key}`=\"{raw}\""),
    })
}

/// Parse an OSM XML document.
pub fn parse_osm<R: Read>(mut input: R) -> Result<(OsmElementSet, ParseReport), OsmError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    parse_osm_bytes(&bytes)
}

pub fn parse_osm_bytes(bytes: &[u8]) -> Result<(OsmElementSet, ParseReport), OsmError> {
    let mut reader = Reader::from_reader(bytes);
    reader.config_mut().check_end_names = true;

    let mut report = ParseReport::default();
    let mut coords: HashMap<i64, GeoPoint> = HashMap::new();
    let mut tagged_nodes: Vec<(i64, GeoPoint, BTreeMap<String, String>)> = Vec::new();
    let mut ways: Vec<RawWay> = Vec::new();
    let mut pending = Pending::None;
    let mut buf = Vec::new();
    let (mut line, mut counted) = (1usize, 0usize);

    loop {
        let event = reader.read_event_into(&mut buf).map_err(|err| OsmError::Xml {
            line: line_of(bytes, reader.error_position()),
            message: err.to_string(),
        })?;
        // Advance the line counter incrementally to keep parsing linear.
        let pos = (reader.buffer_position() as usize).min(bytes.len());
        line += bytes[counted..pos].iter().filter(|&&b| b == b'\n').count();
        counted = pos;
        let (start, is_empty) = match &event {
            Event::Start(e) => (Some(e), false),
            Event::Empty(e) => (Some(e), true),
            _ => (None, false),
        };
        if let Some(e) = start {
            match e.name().as_ref() {
                b"node" => {
                    let a = attrs(e, line)?;
                    let id: i64 = required(&a, "id", "node", line)?;
                    let lat: f64 = required(&a, "lat", "node", line)?;
                    let lon: f64 = required(&a, "lon", "node", line)?;
                    let point = GeoPoint::new(lat, lon).map_err(|err| OsmError::Attribute {
                        line,
                        message: format!("node {id}: {err}"),
                    })?;
                    coords.insert(id, point);
                    pending = Pending::Node {
                        id,
                        point,
                        tags: BTreeMap::new(),
                    };
                }
                b"way" => {
                    let a = attrs(e, line)?;
                    let id: i64 = required(&a, "id", "way", line)?;
                    pending = Pending::Way {
                        id,
                        refs: Vec::new(),
                        tags: BTreeMap::new(),
                    };
                }
                b"relation" => {
                    report.relations_skipped += 1;
                    pending = Pending::Relation;
                }
                b"nd" => {
                    if let Pending::Way { refs, .. } = &mut pending {
                        let a = attrs(e, line)?;
                        refs.push(required(&a, "ref", "nd", line)?);
                    }
                }
                b"tag" => {
                    let a = attrs(e, line)?;
                    let k: String = required(&a, "k", "tag", line)?;
                    let v: String = required(&a, "v", "tag", line)?;
                    match &mut pending {
                        Pending::Node { tags, .. } | Pending::Way { tags, .. } => {
                            tags.insert(k, v);
                        }
                        _ => {}
                    }
                }
                _ => {}
            }
            if is_empty {
                if let Some(name) = ["node", "way", "relation"]
                    .into_iter()
                    .find(|n| e.name().as_ref() == n.as_bytes())
                {
                    finish(name, &mut pending, &mut tagged_nodes, &mut ways);
                }
            }
        }
        match event {
            Event::End(e) => {
                if let Some(name) = ["node", "way", "relation"]
                    .into_iter()
                    .find(|n| e.name().as_ref() == n.as_bytes())
                {
                    finish(name, &mut pending, &mut tagged_nodes, &mut ways);
                }
            }
            Event::Eof => break,
            _ => {}
        }
        buf.clear();
    }

    let mut elements = Vec::new();
    for (id, point, tags) in tagged_nodes {
        match label_for_element(&tags) {
            Some(label) => elements.push(OsmElement {
                id,
                kind: ElementKind::Node,
                label,
                geometry: vec![point],
                tags,
            }),
            None => report.unlabeled += 1,
        }
    }
    for way in ways {
        if way.tags.is_empty() {
            continue;
        }
        let geometry: Option<Vec<GeoPoint>> = way.refs.iter().map(|r| coords.get(r).copied()).collect();
        let Some(geometry) = geometry else {
            report.ways_missing_nodes += 1;
            continue;
        };
        if geometry.len() < 2 {
            report.degenerate_ways += 1;
            continue;
        }
        match label_for_element(&way.tags) {
            Some(label) => elements.push(OsmElement {
                id: way.id,
                kind: ElementKind::Way,
                label,
                geometry,
                tags: way.tags,
            }),
            None => report.unlabeled += 1,
        }
    }
    Ok((OsmElementSet::new(elements), report))
}

fn finish(
    name: &str,
    pending: &mut Pending,
    tagged_nodes: &mut Vec<(i64, GeoPoint, BTreeMap<String, String>)>,
    ways: &mut Vec<RawWay>,
) {
    match (name, std::mem::replace(pending, Pending::None)) {
        ("node", Pending::Node { id, point, tags }) => {
            if !tags.is_empty() {
                tagged_nodes.push((id, point, tags));
            }
        }
        ("way", Pending::Way { id, refs, tags }) => ways.push(RawWay { id, refs, tags }),
        ("relation", Pending::Relation) => {}
        (_, other) => *pending = other,
    }
}

/// One hit of a radius query: the element and its nearest vertex in the
/// query's ENU frame.
#[derive(Debug, Clone, Copy)]
pub struct ElementHit<'a> {
    pub element: &'a OsmElement,
    pub nearest: EnuPoint,
}

const CELL_DEGREES: f64 = 0.002;

type CellKey = (i64, i64);

fn cell_of(point: GeoPoint) -> CellKey {
    (
        (point.lat() / CELL_DEGREES).floor() as i64,
        (point.lon() / CELL_DEGREES).floor() as i64,
    )
}

/// Immutable collection of elements with a uniform lat/lon grid over their
/// vertices.
#[derive(Debug, Clone, Default)]
pub struct OsmElementSet {
    elements: Vec<OsmElement>,
    grid: HashMap<CellKey, Vec<u32>>,
}

impl OsmElementSet {
    /// Build the set; elements are ordered by (id, kind).
    pub fn new(mut elements: Vec<OsmElement>) -> Self {
        elements.sort_by_key(|e| (e.id, e.kind));
        let mut grid: HashMap<CellKey, Vec<u32>> = HashMap::new();
        for (idx, element) in elements.iter().enumerate() {
            let cells: HashSet<CellKey> = element.geometry.iter().map(|&p| cell_of(p)).collect();
            for cell in cells {
                grid.entry(cell).or_default().push(idx as u32);
            }
        }
        Self { elements, grid }
    }

    pub fn elements(&self) -> &[OsmElement] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    fn hit(element: &OsmElement, center: GeoPoint, radius: f64) -> Option<ElementHit<'_>> {
        let mut best: Option<(f64, EnuPoint)> = None;
        for &vertex in &element.geometry {
            let enu = enu_from_validated(vertex, center);
            let d = enu_distance(enu, EnuPoint::ORIGIN);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, enu));
            }
        }
        let (d, nearest) = best?;
        (d <= radius).then_some(ElementHit { element, nearest })
    }

    /// Every element with a vertex within `radius` meters of `center`,
    /// ascending by element id.
    pub fn elements_within(&self, center: GeoPoint, radius: f64) -> Vec<ElementHit<'_>> {
        assert!(radius > 0.0, "radius must be positive");
        let (m_lat, m_lon) = meters_per_degree(center.lat());
        // Padded so the box always contains the query disk.
        let dlat = radius * 1.1 / m_lat + 1e-9;
        let dlon = if m_lon > 1.0 { radius * 1.1 / m_lon + 1e-9 } else { 360.0 };
        let lat_lo = ((center.lat() - dlat) / CELL_DEGREES).floor() as i64;
        let lat_hi = ((center.lat() + dlat) / CELL_DEGREES).floor() as i64;
        let lon_lo = ((center.lon() - dlon) / CELL_DEGREES).floor() as i64;
        let lon_hi = ((center.lon() + dlon) / CELL_DEGREES).floor() as i64;
        let span = ((lat_hi - lat_lo + 1) as u128) * ((lon_hi - lon_lo + 1) as u128);
        if span > self.grid.len() as u128 {
            return self.scan_within(center, radius);
        }
        let mut candidates: Vec<u32> = Vec::new();
        for la in lat_lo..=lat_hi {
            for lo in lon_lo..=lon_hi {
                if let Some(ids) = self.grid.get(&(la, lo)) {
                    candidates.extend_from_slice(ids);
                }
            }
        }
        candidates.sort_unstable();
        candidates.dedup();
        candidates
            .into_iter()
            .filter_map(|idx| Self::hit(&self.elements[idx as usize], center, radius))
            .collect()
    }

    /// Linear scan without the index.
    pub fn scan_within(&self, center: GeoPoint, radius: f64) -> Vec<ElementHit<'_>> {
        self.elements
            .iter()
            .filter_map(|e| Self::hit(e, center, radius))
            .collect()
    }

    /// Serialize to the compact binary element store.
    pub fn write_store<W: Write>(&self, mut out: W) -> Result<(), OsmError> {
        out.write_all(STORE_MAGIC)?;
        out.write_all(&[STORE_VERSION])?;
        out.write_all(&(self.elements.len() as u64).to_le_bytes())?;
        for e in &self.elements {
            out.write_all(&e.id.to_le_bytes())?;
            out.write_all(&[match e.kind {
                ElementKind::Node => 0,
                ElementKind::Way => 1,
            }])?;
            write_str(&mut out, &e.label)?;
            out.write_all(&(e.geometry.len() as u32).to_le_bytes())?;
            for p in &e.geometry {
                out.write_all(&p.lat().to_le_bytes())?;
                out.write_all(&p.lon().to_le_bytes())?;
            }
            out.write_all(&(e.tags.len() as u32).to_le_bytes())?;
            for (k, v) in &e.tags {
                write_str(&mut out, k)?;
                write_str(&mut out, v)?;
            }
        }
        Ok(())
    }

    pub fn read_store<R: Read>(mut input: R) -> Result<Self, OsmError> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != STORE_MAGIC {
            return Err(OsmError::Store("bad magic".into()));
        }
        let version = cur.take(1)?[0];
        if version != STORE_VERSION {
            return Err(OsmError::Store(format!("unsupported version {version}")));
        }
        let count = cur.u64()? as usize;
        let mut elements = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let id = i64::from_le_bytes(cur.take(8)?.try_into().unwrap());
            let kind = match cur.take(1)?[0] {
                0 => ElementKind::Node,
                1 => ElementKind::Way,
                k => return Err(OsmError::Store(format!("unknown element kind {k}"))),
            };
            let label = cur.string()?;
            let n = cur.u32()? as usize;
            let mut geometry = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                let lat = cur.f64()?;
                let lon = cur.f64()?;
                geometry.push(GeoPoint::new(lat, lon).map_err(|e| OsmError::Store(e.to_string()))?);
            }
            let t = cur.u32()? as usize;
            let mut tags = BTreeMap::new();
            for _ in 0..t {
                let k = cur.string()?;
                let v = cur.string()?;
                tags.insert(k, v);
            }
            elements.push(OsmElement {
                id,
                kind,
                label,
                geometry,
                tags,
            });
        }
        if cur.pos != bytes.len() {
            return Err(OsmError::Store("trailing bytes".into()));
        }
        Ok(Self::new(elements))
    }
}

/// Magic prefix of the binary element store.
pub const STORE_MAGIC: &[u8; 4] = b"GPRE";
const STORE_VERSION: u8 = 1;

fn write_str<W: Write>(out: &mut W, s: &str) -> std::io::Result<()> {
    out.write_all(&(s.len() as u32).to_le_bytes())?;
    out.write_all(s.as_bytes())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], OsmError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| OsmError::Store("truncated".into()))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }
    fn u32(&mut self) -> Result<u32, OsmError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, OsmError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, OsmError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String, OsmError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| OsmError::Store(e.to_string()))
    }
}
