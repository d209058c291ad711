use std::fmt;

use serde::{Deserialize, Serialize};

use super::DataError;
use crate::tensorcore::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Platform {
    Web,
    App,
}

impl Platform {
    pub const ALL: [Platform; 2] = [Platform::Web, Platform::App];

    pub fn as_str(self) -> &'static str {
        match self {
            Platform::Web => "web",
            Platform::App => "app",
        }
    }
}

impl fmt::Display for Platform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Funnel actions in the order a buyer performs them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Click,
    #[serde(rename = "add_to_cart", alias = "cart")]
    AddToCart,
    Purchase,
}

impl Task {
    pub const FUNNEL: [Task; 3] = [Task::Click, Task::AddToCart, Task::Purchase];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Click => "click",
            Task::AddToCart => "add_to_cart",
            Task::Purchase => "purchase",
        }
    }

    /// Task list for a k-task run: two tasks skip add-to-cart.
    pub fn standard(k: usize) -> Option<Vec<Task>> {
        match k {
            2 => Some(vec![Task::Click, Task::Purchase]),
            3 => Some(Task::FUNNEL.to_vec()),
            _ => None,
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        match s {
            "click" => Some(Task::Click),
            "cart" | "add_to_cart" => Some(Task::AddToCart),
            "purchase" => Some(Task::Purchase),
            _ => None,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Realized funnel outcome. Construction enforces
/// `purchase <= add_to_cart <= click`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct FunnelLabels {
    click: bool,
    cart: bool,
    purchase: bool,
}

impl FunnelLabels {
    pub fn new(click: bool, cart: bool, purchase: bool) -> Option<Self> {
        let ok = (!cart || click) && (!purchase || cart);
        ok.then_some(Self {
            click,
            cart,
            purchase,
        })
    }

    pub fn click(self) -> bool {
        self.click
    }

    pub fn cart(self) -> bool {
        self.cart
    }

    pub fn purchase(self) -> bool {
        self.purchase
    }

    pub fn get(self, task: Task) -> bool {
        match task {
            Task::Click => self.click,
            Task::AddToCart => self.cart,
            Task::Purchase => self.purchase,
        }
    }

    /// Graded gain ladder 0 / 1 / 2 / 4 for none / click / cart / purchase.
    pub fn graded_gain(self) -> f64 {
        if self.purchase {
            4.0
        } else if self.cart {
            2.0
        } else if self.click {
            1.0
        } else {
            0.0
        }
    }
}

/// One `<user, query, listing>` row.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionRecord {
    pub query_id: String,
    pub region: u32,
    pub platform: Platform,
    pub listing_region: u32,
    pub x_user: Vec<f64>,
    pub x_listing: Vec<f64>,
    pub labels: FunnelLabels,
}

impl InteractionRecord {
    pub fn is_domestic(&self) -> bool {
        self.listing_region == self.region
    }

    pub fn feature_dim(&self) -> usize {
        self.x_user.len() + self.x_listing.len()
    }

    /// `x_user ++ x_listing` written into `out`.
    pub fn write_features(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.x_user);
        out.extend_from_slice(&self.x_listing);
    }

    pub fn features(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.feature_dim());
        self.write_features(&mut v);
        v
    }
}

/// Candidates shown for one `(user, query)` impression.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryGroup {
    pub query_id: String,
    pub region: u32,
    pub platform: Platform,
    pub records: Vec<InteractionRecord>,
}

impl QueryGroup {
    pub fn new(
        query_id: impl Into<String>,
        region: u32,
        platform: Platform,
        records: Vec<InteractionRecord>,
    ) -> Result<Self, DataError> {
        let query_id = query_id.into();
        if records.is_empty() {
            return Err(DataError::EmptyGroup(query_id));
        }
        if let Some(r) = records
            .iter()
            .find(|r| r.query_id != query_id || r.region != region || r.platform != platform)
        {
            return Err(DataError::InconsistentGroup {
                query_id,
                other: r.query_id.clone(),
            });
        }
        Ok(Self {
            query_id,
            region,
            platform,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self, task: Task) -> impl Iterator<Item = bool> + '_ {
        self.records.iter().map(move |r| r.labels.get(task))
    }
}

/// Stable bucket in `[0, 1)` for a query id.
pub fn query_fraction(query_id: &str) -> f64 {
    (derive_seed(0x5eed, query_id) >> 11) as f64 / (1u64 << 53) as f64
}

/// Train / validation / test partition by query id hash, so no group
/// straddles two parts.
#[derive(Debug, Clone, Default)]
pub struct DataSplit {
    pub train: Vec<QueryGroup>,
    pub val: Vec<QueryGroup>,
    pub test: Vec<QueryGroup>,
}

impl DataSplit {
    pub fn by_query_hash(groups: &[QueryGroup], val_fraction: f64, test_fraction: f64) -> Self {
        let mut s = DataSplit::default();
        for g in groups {
            let u = query_fraction(&g.query_id);
            if u < val_fraction {
                s.val.push(g.clone());
            } else if u < val_fraction + test_fraction {
                s.test.push(g.clone());
            } else {
                s.train.push(g.clone());
            }
        }
        s
    }
}

pub fn record_count(groups: &[QueryGroup]) -> usize {
    groups.iter().map(QueryGroup::len).sum()
}
