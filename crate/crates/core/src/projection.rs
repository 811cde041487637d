//! WGS84 <-> UTM zone 17N (EPSG:32617).
//!
//! Transverse Mercator via the Krüger series carried to sixth order in the
//! third flattening `n`. At the few-degree offsets from the central meridian
//! used here the truncation error is well below a millimetre.

use thiserror::Error;

/// WGS84 semi-major axis, metres.
pub const WGS84_A: f64 = 6_378_137.0;
/// WGS84 flattening.
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;

pub const UTM_SCALE: f64 = 0.9996;
pub const UTM_FALSE_EASTING: f64 = 500_000.0;
pub const ZONE17_CENTRAL_MERIDIAN: f64 = -81.0;

/// Longitude band accepted by the forward projection.
pub const LON_BAND: (f64, f64) = (-84.0, -78.0);
/// Latitude band accepted by the forward projection (northern hemisphere UTM).
pub const LAT_BAND: (f64, f64) = (0.0, 84.0);

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum ProjectionError {
    #[error("coordinate ({lat}, {lon}) outside the UTM 17N band")]
    OutOfBand { lat: f64, lon: f64 },
}

/// Series coefficients for one ellipsoid and zone.
#[derive(Debug, Clone)]
pub struct TransverseMercator {
    lon0: f64,
    false_easting: f64,
    false_northing: f64,
    e: f64,
    e2: f64,
    /// Rectifying radius times scale.
    k0_a: f64,
    alpha: [f64; 6],
    beta: [f64; 6],
}

impl TransverseMercator {
    pub fn utm17n() -> Self {
        Self::new(
            WGS84_A,
            WGS84_F,
            ZONE17_CENTRAL_MERIDIAN,
            UTM_SCALE,
            UTM_FALSE_EASTING,
            0.0,
        )
    }

    pub fn new(a: f64, f: f64, lon0_deg: f64, k0: f64, false_easting: f64, false_northing: f64) -> Self {
        let n = f / (2.0 - f);
        let n2 = n * n;
        let n3 = n2 * n;
        let n4 = n3 * n;
        let n5 = n4 * n;
        let n6 = n5 * n;
        let rect = a / (1.0 + n) * (1.0 + n2 / 4.0 + n4 / 64.0 + n6 / 256.0);
        let alpha = [
            n / 2.0 - 2.0 * n2 / 3.0 + 5.0 * n3 / 16.0 + 41.0 * n4 / 180.0 - 127.0 * n5 / 288.0 + 7891.0 * n6 / 37800.0,
            13.0 * n2 / 48.0 - 3.0 * n3 / 5.0 + 557.0 * n4 / 1440.0 + 281.0 * n5 / 630.0
                - 1_983_433.0 * n6 / 1_935_360.0,
            61.0 * n3 / 240.0 - 103.0 * n4 / 140.0 + 15061.0 * n5 / 26880.0 + 167_603.0 * n6 / 181_440.0,
            49561.0 * n4 / 161_280.0 - 179.0 * n5 / 168.0 + 6_601_661.0 * n6 / 7_257_600.0,
            34729.0 * n5 / 80640.0 - 3_418_889.0 * n6 / 1_995_840.0,
            212_378_941.0 * n6 / 319_334_400.0,
        ];
        let beta = [
            n / 2.0 - 2.0 * n2 / 3.0 + 37.0 * n3 / 96.0 - n4 / 360.0 - 81.0 * n5 / 512.0 + 96199.0 * n6 / 604_800.0,
            n2 / 48.0 + n3 / 15.0 - 437.0 * n4 / 1440.0 + 46.0 * n5 / 105.0 - 1_118_711.0 * n6 / 3_870_720.0,
            17.0 * n3 / 480.0 - 37.0 * n4 / 840.0 - 209.0 * n5 / 4480.0 + 5569.0 * n6 / 90720.0,
            4397.0 * n4 / 161_280.0 - 11.0 * n5 / 504.0 - 830_251.0 * n6 / 7_257_600.0,
            4583.0 * n5 / 161_280.0 - 108_847.0 * n6 / 3_991_680.0,
            20_648_693.0 * n6 / 638_668_800.0,
        ];
        let e2 = f * (2.0 - f);
        Self {
            lon0: lon0_deg.to_radians(),
            false_easting,
            false_northing,
            e: e2.sqrt(),
            e2,
            k0_a: k0 * rect,
            alpha,
            beta,
        }
    }

    /// Geographic degrees to (easting, northing) metres. No band check.
    pub fn forward_unchecked(&self, lat_deg: f64, lon_deg: f64) -> (f64, f64) {
        let phi = lat_deg.to_radians();
        let lam = lon_deg.to_radians() - self.lon0;
        let s = phi.sin();
        // tangent of the conformal latitude
        let t = (s.atanh() - self.e * (self.e * s).atanh()).sinh();
        let xi_p = t.atan2(lam.cos());
        let eta_p = (lam.sin() / (1.0 + t * t).sqrt()).atanh();
        let mut xi = xi_p;
        let mut eta = eta_p;
        for (j, a) in self.alpha.iter().enumerate() {
            let k = 2.0 * (j as f64 + 1.0);
            xi += a * (k * xi_p).sin() * (k * eta_p).cosh();
            eta += a * (k * xi_p).cos() * (k * eta_p).sinh();
        }
        (
            self.false_easting + self.k0_a * eta,
            self.false_northing + self.k0_a * xi,
        )
    }

    /// (easting, northing) metres back to geographic degrees.
    pub fn inverse(&self, easting: f64, northing: f64) -> (f64, f64) {
        let xi = (northing - self.false_northing) / self.k0_a;
        let eta = (easting - self.false_easting) / self.k0_a;
        let mut xi_p = xi;
        let mut eta_p = eta;
        for (j, b) in self.beta.iter().enumerate() {
            let k = 2.0 * (j as f64 + 1.0);
            xi_p -= b * (k * xi).sin() * (k * eta).cosh();
            eta_p -= b * (k * xi).cos() * (k * eta).sinh();
        }
        let tau_conf = xi_p.sin() / (eta_p.sinh().hypot(xi_p.cos()));
        let lam = eta_p.sinh().atan2(xi_p.cos());
        let tau = self.tau_from_conformal(tau_conf);
        (tau.atan().to_degrees(), (self.lon0 + lam).to_degrees())
    }

    // Newton iteration for tan(phi) given the tangent of the conformal latitude.
    fn tau_from_conformal(&self, tau_conf: f64) -> f64 {
        let one_e2 = 1.0 - self.e2;
        let mut tau = tau_conf;
        for _ in 0..6 {
            let sig = (self.e * (self.e * tau / (1.0 + tau * tau).sqrt()).atanh()).sinh();
            let tau_i = tau * (1.0 + sig * sig).sqrt() - sig * (1.0 + tau * tau).sqrt();
            let step = (tau_conf - tau_i) * (1.0 + one_e2 * tau * tau)
                / (one_e2 * (1.0 + tau_i * tau_i).sqrt() * (1.0 + tau * tau).sqrt());
            tau += step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        tau
    }
}

thread_local! {
    static UTM17N: TransverseMercator = TransverseMercator::utm17n();
}

/// WGS84 degrees to UTM 17N metres, rejecting points outside the zone band.
pub fn project_wgs84_to_utm17n(lat: f64, lon: f64) -> Result<(f64, f64), ProjectionError> {
    if !(LAT_BAND.0..=LAT_BAND.1).contains(&lat) || !(LON_BAND.0..=LON_BAND.1).contains(&lon) {
        return Err(ProjectionError::OutOfBand { lat, lon });
    }
    Ok(UTM17N.with(|tm| tm.forward_unchecked(lat, lon)))
}

/// UTM 17N metres to WGS84 (lat, lon) degrees.
pub fn utm17n_to_wgs84(easting: f64, northing: f64) -> (f64, f64) {
    UTM17N.with(|tm| tm.inverse(easting, northing))
}
