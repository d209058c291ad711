//! Seeded multi-region funnel data.
//!
//! Feature layout of every record (indices into `x_user ++ x_listing`):
//!
//! ```text
//! [ user raw (u) | region one-hot (R) | listing raw (p - 1) | domestic flag ]
//!   \________ x_user, m = u + R ______/ \__________ x_listing, p ________/
//! ```
//!
//! Each record draws a standard-normal latent vector over the raw columns.
//! Planted dependent columns are observed as `mu[r, j] + sigma[r, j] * z_j`
//! with region-specific location and scale; all other raw columns are the
//! latent itself. Labels depend on the latent, so a model must undo the
//! regional transform to read dependent columns consistently.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{DataError, DataHeader, FunnelLabels, InteractionRecord, Platform, QueryGroup};
use crate::tensorcore::derive_seed;

/// Base rates of the funnel's three conditional steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FunnelRates {
    pub click: f64,
    pub cart_given_click: f64,
    pub purchase_given_cart: f64,
}

impl Default for FunnelRates {
    fn default() -> Self {
        Self {
            click: 0.3,
            cart_given_click: 0.4,
            purchase_given_cart: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub regions: usize,
    /// Buyer-region sampling weights; must sum to 1.
    pub region_weights: Vec<f64>,
    /// Raw user + query columns, before the region one-hot.
    pub user_features: usize,
    /// Listing columns including the trailing domestic flag.
    pub listing_features: usize,
    pub n_queries: usize,
    pub candidates_per_query: usize,
    /// Magnitude of the regional transform of dependent columns, per region.
    pub shift_strength: Vec<f64>,
    /// Planted dependent columns (indices into the full feature vector).
    pub dependent_features: Vec<usize>,
    pub funnel: FunnelRates,
    /// Added to the purchase logit when the listing is domestic, per region.
    pub domestic_preference: Vec<f64>,
    /// Probability that a candidate listing is domestic, per region.
    pub domestic_supply: Vec<f64>,
    /// Scale of feature effects on every funnel logit. `0` makes labels
    /// independent of features.
    pub signal_strength: f64,
    pub app_share: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            regions: 4,
            region_weights: vec![0.4, 0.3, 0.2, 0.1],
            user_features: 6,
            listing_features: 10,
            n_queries: 2500,
            candidates_per_query: 20,
            shift_strength: vec![2.0, 1.5, 1.0, 0.5],
            dependent_features: vec![0, 1, 2, 3, 4],
            funnel: FunnelRates::default(),
            domestic_preference: vec![1.5, -1.5, 1.0, -1.0],
            domestic_supply: vec![0.7, 0.3, 0.5, 0.2],
            signal_strength: 1.0,
            app_share: 0.6,
        }
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl GeneratorConfig {
    pub fn m(&self) -> usize {
        self.user_features + self.regions
    }

    pub fn p(&self) -> usize {
        self.listing_features
    }

    pub fn feature_dim(&self) -> usize {
        self.m() + self.p()
    }

    pub fn header(&self) -> DataHeader {
        DataHeader {
            m: self.m(),
            p: self.p(),
            regions: self.regions,
        }
    }

    pub fn country_idx(&self) -> Vec<usize> {
        self.header().country_idx()
    }

    /// Index of the domestic flag column.
    pub fn domestic_idx(&self) -> usize {
        self.feature_dim() - 1
    }

    /// Whether a full-vector column carries a latent (raw) feature.
    fn raw_column(&self, j: usize) -> Option<usize> {
        let u = self.user_features;
        let m = self.m();
        if j < u {
            Some(j)
        } else if j >= m && j < self.domestic_idx() {
            Some(j - m + u)
        } else {
            None
        }
    }

    fn latent_dim(&self) -> usize {
        self.user_features + self.listing_features - 1
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::InvalidConfig(msg));
        if self.regions == 0 {
            return bad("at least one region is required".into());
        }
        if self.candidates_per_query < 2 {
            return bad("candidates_per_query must be at least 2".into());
        }
        if self.n_queries == 0 {
            return bad("n_queries must be positive".into());
        }
        if self.listing_features == 0 {
            return bad("listing_features must include the domestic flag".into());
        }
        for (name, v) in [
            ("region_weights", &self.region_weights),
            ("shift_strength", &self.shift_strength),
            ("domestic_preference", &self.domestic_preference),
            ("domestic_supply", &self.domestic_supply),
        ] {
            if v.len() != self.regions {
                return bad(format!("{name} has {} entries for {} regions", v.len(), self.regions));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return bad(format!("{name} must be finite"));
            }
        }
        if self.region_weights.iter().any(|&w| w < 0.0) {
            return bad("region_weights must be non-negative".into());
        }
        let total: f64 = self.region_weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("region_weights sum to {total}, expected 1"));
        }
        if self.shift_strength.iter().any(|&s| s < 0.0) {
            return bad("shift_strength must be non-negative".into());
        }
        let probs = [
            ("funnel.click", self.funnel.click),
            ("funnel.cart_given_click", self.funnel.cart_given_click),
            ("funnel.purchase_given_cart", self.funnel.purchase_given_cart),
            ("app_share", self.app_share),
        ];
        for (name, p) in probs {
            if !(p > 0.0 && p < 1.0) {
                return bad(format!("{name} = {p} must lie in (0, 1)"));
            }
        }
        if self.domestic_supply.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return bad("domestic_supply must lie in [0, 1]".into());
        }
        if self.regions == 1 && self.domestic_supply[0] < 1.0 {
            return bad("a single region can only supply domestic listings".into());
        }
        if !self.signal_strength.is_finite() {
            return bad("signal_strength must be finite".into());
        }
        for &j in &self.dependent_features {
            if self.raw_column(j).is_none() {
                return bad(format!(
                    "dependent feature {j} is not a raw column (country and domestic columns excluded)"
                ));
            }
        }
        Ok(())
    }
}

/// Distribution parameters shared by every group of one config.
struct World {
    /// `[region][latent]` location and scale of dependent columns.
    loc: Vec<Vec<f64>>,
    scale: Vec<Vec<f64>>,
    dependent: Vec<bool>,
    w_click: Vec<f64>,
    w_cart: Vec<f64>,
    w_purchase: Vec<f64>,
    region_bias: Vec<f64>,
}

impl World {
    fn new(cfg: &GeneratorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "world"));
        let d = cfg.latent_dim();
        let mut dependent = vec![false; d];
        for &j in &cfg.dependent_features {
            dependent[cfg.raw_column(j).expect("validated")] = true;
        }
        let mut loc = vec![vec![0.0; d]; cfg.regions];
        let mut scale = vec![vec![1.0; d]; cfg.regions];
        for r in 0..cfg.regions {
            let s = cfg.shift_strength[r];
            for j in 0..d {
                let a: f64 = rng.gen_range(-1.0..1.0);
                let b: f64 = rng.gen_range(-1.0..1.0);
                if dependent[j] {
                    loc[r][j] = s * a;
                    scale[r][j] = (0.5 * s * b).exp();
                }
            }
        }
        let norm = 1.0 / (d as f64).sqrt();
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) * norm).collect()
        };
        let w_click = draw(&mut rng);
        let fresh_cart = draw(&mut rng);
        let fresh_buy = draw(&mut rng);
        let w_cart: Vec<f64> = w_click
            .iter()
            .zip(&fresh_cart)
            .map(|(c, f)| 0.6 * c + 0.8 * f)
            .collect();
        // purchase leans on the regional columns
        let w_purchase: Vec<f64> = (0..d)
            .map(|j| {
                let base = 0.5 * w_click[j] + 0.5 * w_cart[j] + 0.7 * fresh_buy[j];
                if dependent[j] {
                    2.0 * base
                } else {
                    base
                }
            })
            .collect();
        let region_bias = (0..cfg.regions).map(|_| rng.gen_range(-0.3..0.3)).collect();
        Self {
            loc,
            scale,
            dependent,
            w_click,
            w_cart,
            w_purchase,
            region_bias,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sample_region<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

fn generate_group(cfg: &GeneratorConfig, world: &World, q: usize) -> QueryGroup {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("group/{q}")));
    let region = sample_region(&mut rng, &cfg.region_weights);
    let platform = if rng.gen::<f64>() < cfg.app_share {
        Platform::App
    } else {
        Platform::Web
    };
    let query_id = format!("q{q:07}");
    let u = cfg.user_features;
    let d = cfg.latent_dim();
    let beta = cfg.signal_strength;
    let platform_bias = match platform {
        Platform::App => 0.2,
        Platform::Web => 0.0,
    };

    let records = (0..cfg.candidates_per_query)
        .map(|_| {
            let z: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let observed: Vec<f64> = (0..d)
                .map(|j| {
                    if world.dependent[j] {
                        world.loc[region][j] + world.scale[region][j] * z[j]
                    } else {
                        z[j]
                    }
                })
                .collect();
            let domestic = cfg.regions == 1 || rng.gen::<f64>() < cfg.domestic_supply[region];
            let listing_region = if domestic {
                region
            } else {
                let k = rng.gen_range(0..cfg.regions - 1);
                if k >= region {
                    k + 1
                } else {
                    k
                }
            };

            let click_logit =
                logit(cfg.funnel.click) + beta * dot(&world.w_click, &z) + world.region_bias[region] + platform_bias;
            let cart_logit = logit(cfg.funnel.cart_given_click) + beta * dot(&world.w_cart, &z);
            let buy_logit = logit(cfg.funnel.purchase_given_cart)
                + beta * dot(&world.w_purchase, &z)
                + if domestic { cfg.domestic_preference[region] } else { 0.0 };
            let click = rng.gen::<f64>() < sigmoid(click_logit);
            let cart_draw = rng.gen::<f64>() < sigmoid(cart_logit);
            let buy_draw = rng.gen::<f64>() < sigmoid(buy_logit);
            let cart = click && cart_draw;
            let purchase = cart && buy_draw;

            let mut x_user = Vec::with_capacity(cfg.m());
            x_user.extend_from_slice(&observed[..u]);
            x_user.extend((0..cfg.regions).map(|r| if r == region { 1.0 } else { 0.0 }));
            let mut x_listing = Vec::with_capacity(cfg.p());
            x_listing.extend_from_slice(&observed[u..]);
            x_listing.push(if domestic { 1.0 } else { 0.0 });

            InteractionRecord {
                query_id: query_id.clone(),
                region: region as u32,
                platform,
                listing_region: listing_region as u32,
                x_user,
                x_listing,
                labels: FunnelLabels::new(click, cart, purchase).expect("funnel by construction"),
            }
        })
        .collect();
    QueryGroup::new(query_id, region as u32, platform, records).expect("consistent by construction")
}

/// Generates `n_queries` groups. Output is a pure function of `cfg`;
/// groups are built in parallel from per-group seeds and returned in
/// query order.
pub fn generate(cfg: &GeneratorConfig) -> Result<Vec<QueryGroup>, DataError> {
    cfg.validate()?;
    let world = World::new(cfg);
    Ok((0..cfg.n_queries)
        .into_par_iter()
        .map(|q| generate_group(cfg, &world, q))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            n_queries: 50,
            candidates_per_query: 5,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn deterministic_under_seed() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = GeneratorConfig { seed: 1, ..small() };
        assert_ne!(generate(&small()).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn layout_matches_header() {
        let cfg = small();
        for g in generate(&cfg).unwrap() {
            for r in &g.records {
                assert_eq!(r.x_user.len(), cfg.m());
                assert_eq!(r.x_listing.len(), cfg.p());
                let onehot = &r.x_user[cfg.user_features..];
                assert_eq!(onehot.iter().sum::<f64>(), 1.0);
                assert_eq!(onehot[r.region as usize], 1.0);
                let flag = *r.x_listing.last().unwrap();
                assert_eq!(flag == 1.0, r.is_domestic());
            }
        }
    }

    #[test]
    fn rejects_degenerate_configs() {
        for cfg in [
            GeneratorConfig {
                regions: 0,
                ..small()
            },
            GeneratorConfig {
                candidates_per_query: 0,
                ..small()
            },
            GeneratorConfig {
                region_weights: vec![0.5, 0.3, 0.2, 0.1],
                ..small()
            },
            GeneratorConfig {
                dependent_features: vec![7],
                ..small()
            },
        ] {
            assert!(matches!(generate(&cfg), Err(DataError::InvalidConfig(_))));
        }
    }

    #[test]
    fn partial_json_materializes_defaults() {
        let cfg: GeneratorConfig = serde_json::from_str(r#"{"seed": 7, "n_queries": 10}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.regions, 4);
        assert!(serde_json::from_str::<GeneratorConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
