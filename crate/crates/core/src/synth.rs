//! Seeded synthetic OSM extracts.
//!
//! Produces an XML document with point features and small closed ways
//! scattered uniformly over a rectangle, using a fixed tag vocabulary.

use std::fmt::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geo::{meters_per_degree, GeoError, GeoPoint};

/// Tags used for point features.
pub const POINT_TAGS: [(&str, &str); 36] = [
    ("amenity", "bench"),
    ("amenity", "waste_basket"),
    ("amenity", "parking"),
    ("amenity", "restaurant"),
    ("amenity", "cafe"),
    ("amenity", "bicycle_parking"),
    ("amenity", "post_box"),
    ("amenity", "pharmacy"),
    ("amenity", "school"),
    ("amenity", "bank"),
    ("amenity", "fuel"),
    ("amenity", "toilets"),
    ("amenity", "fast_food"),
    ("amenity", "kindergarten"),
    ("amenity", "drinking_water"),
    ("amenity", "recycling"),
    ("amenity", "vending_machine"),
    ("amenity", "atm"),
    ("amenity", "telephone"),
    ("shop", "bakery"),
    ("shop", "supermarket"),
    ("shop", "kiosk"),
    ("shop", "hairdresser"),
    ("shop", "clothes"),
    ("shop", "florist"),
    ("leisure", "playground"),
    ("leisure", "pitch"),
    ("leisure", "garden"),
    ("highway", "bus_stop"),
    ("highway", "street_lamp"),
    ("highway", "traffic_signals"),
    ("highway", "crossing"),
    ("natural", "tree"),
    ("barrier", "gate"),
    ("barrier", "bollard"),
    ("amenity", "place_of_worship"),
];

/// Tags used for closed ways.
pub const WAY_TAGS: [(&str, &str); 6] = [
    ("building", "house"),
    ("building", "garage"),
    ("building", "apartments"),
    ("building", "industrial"),
    ("landuse", "grass"),
    ("leisure", "park"),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub south_west: GeoPoint,
    pub width_m: f64,
    pub height_m: f64,
    /// Expected number of features inside a 50 m radius disk.
    pub per_disk: f64,
    /// Fraction of features emitted as closed ways.
    pub way_share: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// Area with room for `cells` grid cells spaced `spacing_m` apart.
    pub fn for_grid(cells: usize, spacing_m: f64, seed: u64) -> Self {
        let (rows, cols) = crate::pipeline::grid_shape(cells);
        Self {
            south_west: GeoPoint::new(49.0, 8.38).expect("valid constant"),
            width_m: cols as f64 * spacing_m,
            height_m: rows as f64 * spacing_m,
            per_disk: 13.0,
            way_share: 0.15,
            seed,
        }
    }

    /// South-west and north-east corners of the generated area.
    pub fn bbox(&self) -> Result<(GeoPoint, GeoPoint), GeoError> {
        let (m_lat, m_lon) = meters_per_degree(self.south_west.lat());
        let ne = GeoPoint::new(
            self.south_west.lat() + self.height_m / m_lat,
            self.south_west.lon() + self.width_m / m_lon,
        )?;
        Ok((self.south_west, ne))
    }

    pub fn feature_count(&self) -> usize {
        let disk = std::f64::consts::PI * 50.0 * 50.0;
        (self.width_m * self.height_m / disk * self.per_disk).round() as usize
    }
}

/// Generate the XML document.
pub fn synthetic_osm_xml(cfg: &SynthConfig) -> Result<String, GeoError> {
    let (sw, ne) = cfg.bbox()?;
    let (m_lat, m_lon) = meters_per_degree(sw.lat());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let features = cfg.feature_count();
    let mut nodes = String::with_capacity(features * 160);
    let mut ways = String::new();
    let mut next_node = 1i64;
    let mut next_way = 1i64;
    let _ = writeln!(nodes, "<?xml version=\"1.0\" encoding=\"UTF-8\"?>");
    let _ = writeln!(nodes, "<osm version=\"0.6\" generator=\"textplace-synth\">");
    let _ = writeln!(
        nodes,
        " <bounds minlat=\"{:.7}\" minlon=\"{:.7}\" maxlat=\"{:.7}\" maxlon=\"{:.7}\"/>",
        sw.lat(),
        sw.lon(),
        ne.lat(),
        ne.lon()
    );
    for _ in 0..features {
        let x = rng.random_range(0.0..cfg.width_m);
        let y = rng.random_range(0.0..cfg.height_m);
        let lat = sw.lat() + y / m_lat;
        let lon = sw.lon() + x / m_lon;
        if rng.random_bool(cfg.way_share) {
            let (key, value) = WAY_TAGS[rng.random_range(0..WAY_TAGS.len())];
            let half = rng.random_range(3.0..8.0);
            let corners = [(-half, -half), (half, -half), (half, half), (-half, half)];
            let first = next_node;
            for (dx, dy) in corners {
                let _ = writeln!(
                    nodes,
                    " <node id=\"{}\" lat=\"{:.7}\" lon=\"{:.7}\"/>",
                    next_node,
                    lat + dy / m_lat,
                    lon + dx / m_lon
                );
                next_node += 1;
            }
            let _ = writeln!(ways, " <way id=\"{next_way}\">");
            for id in (first..next_node).chain(std::iter::once(first)) {
                let _ = writeln!(ways, "  <nd ref=\"{id}\"/>");
            }
            let _ = writeln!(ways, "  <tag k=\"{key}\" v=\"{value}\"/>\n </way>");
            next_way += 1;
        } else {
            let (key, value) = POINT_TAGS[rng.random_range(0..POINT_TAGS.len())];
            let _ = writeln!(
                nodes,
                " <node id=\"{next_node}\" lat=\"{lat:.7}\" lon=\"{lon:.7}\">\n  <tag k=\"{key}\" v=\"{value}\"/>\n </node>"
            );
            next_node += 1;
        }
    }
    nodes.push_str(&ways);
    nodes.push_str("</osm>\n");
    Ok(nodes)
}
