use crate::error::{Error, Result};

/// Sphere radius used for great-circle distances.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Location {
    /// Item index (local to the item block).
    pub item: usize,
    pub lat: f64,
    pub lon: f64,
}

/// Great-circle distance in km on a sphere of radius [`EARTH_RADIUS_KM`].
pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.sqrt().min(1.0).asin()
}

/// Undirected neighbor pairs `(a, b)`, `a < b`, between distinct items whose
/// haversine distance is at most `radius_km`.
///
/// Items are swept in latitude order; only pairs inside the latitude band
/// `radius_km / R` radians are compared.
pub fn geo_neighbors(locations: &[Location], radius_km: f64) -> Result<Vec<(usize, usize)>> {
    if !(radius_km >= 0.0 && radius_km.is_finite()) {
        return Err(Error::invalid(format!("radius must be ≥ 0, got {radius_km}")));
    }
    for l in locations {
        if !(-90.0..=90.0).contains(&l.lat) || !(-180.0..=180.0).contains(&l.lon) {
            return Err(Error::invalid(format!(
                "item {} has out-of-range coordinates ({}, {})",
                l.item, l.lat, l.lon
            )));
        }
    }
    let band = (radius_km / EARTH_RADIUS_KM).to_degrees();
    let mut order: Vec<&Location> = locations.iter().collect();
    order.sort_by(|a, b| a.lat.total_cmp(&b.lat).then(a.item.cmp(&b.item)));

    let mut edges = Vec::new();
    for (i, a) in order.iter().enumerate() {
        for b in &order[i + 1..] {
            if b.lat - a.lat > band {
                break;
            }
            if a.item != b.item && haversine_km(a.lat, a.lon, b.lat, b.lon) <= radius_km {
                edges.push((a.item.min(b.item), a.item.max(b.item)));
            }
        }
    }
    edges.sort_unstable();
    edges.dedup();
    Ok(edges)
}
