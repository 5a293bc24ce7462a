//! Hierarchical demand panel: series identity, calendar, prices and the
//! geography × product hierarchy used for bottom-up aggregation.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashSet};
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeriesKey {
    pub sku_id: String,
    pub store_id: String,
    pub state_id: String,
    pub category: String,
    pub department: String,
}

impl SeriesKey {
    pub fn label(&self) -> String {
        format!("{}@{}", self.sku_id, self.store_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalendarDay {
    /// 1-based day counter, contiguous across the panel.
    pub day_index: u32,
    /// ISO `YYYY-MM-DD`.
    pub date: String,
    /// 0 = Monday .. 6 = Sunday.
    pub day_of_week: u8,
    pub month: u8,
    pub is_holiday: bool,
    pub event_name: Option<String>,
}

/// Daily sales and prices for a set of series over a contiguous day range.
///
/// Rows of `sales` and `prices` are series, columns are calendar days.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    keys: Vec<SeriesKey>,
    calendar: Vec<CalendarDay>,
    sales: Vec<Vec<f64>>,
    prices: Vec<Vec<f64>>,
}

impl Panel {
    pub fn new(
        keys: Vec<SeriesKey>,
        calendar: Vec<CalendarDay>,
        sales: Vec<Vec<f64>>,
        prices: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if keys.is_empty() {
            return Err(Error::validation("panel has no series"));
        }
        if calendar.is_empty() {
            return Err(Error::validation("panel has an empty calendar"));
        }
        for w in calendar.windows(2) {
            if w[1].day_index != w[0].day_index + 1 {
                return Err(Error::validation(format!(
                    "calendar not contiguous between day {} and day {}",
                    w[0].day_index, w[1].day_index
                )));
            }
        }
        if calendar[0].day_index < 1 {
            return Err(Error::validation("day_index must be >= 1"));
        }
        let mut seen = HashSet::new();
        for k in &keys {
            if !seen.insert((k.sku_id.as_str(), k.store_id.as_str())) {
                return Err(Error::validation(format!("duplicate series {}", k.label())));
            }
        }
        if sales.len() != keys.len() || prices.len() != keys.len() {
            return Err(Error::validation("sales/prices row count does not match keys"));
        }
        let n_days = calendar.len();
        for (s, (row, prow)) in sales.iter().zip(&prices).enumerate() {
            if row.len() != n_days || prow.len() != n_days {
                return Err(Error::validation(format!(
                    "series {s}: row length does not match calendar ({n_days})"
                )));
            }
            if let Some(v) = row.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
                return Err(Error::validation(format!("series {s}: invalid sales value {v}")));
            }
            if let Some(p) = prow.iter().find(|p| !(**p > 0.0) || !p.is_finite()) {
                return Err(Error::validation(format!("series {s}: invalid price {p}")));
            }
        }
        Ok(Panel {
            keys,
            calendar,
            sales,
            prices,
        })
    }

    pub fn keys(&self) -> &[SeriesKey] {
        &self.keys
    }

    pub fn calendar(&self) -> &[CalendarDay] {
        &self.calendar
    }

    pub fn sales(&self) -> &[Vec<f64>] {
        &self.sales
    }

    pub fn prices(&self) -> &[Vec<f64>] {
        &self.prices
    }

    pub fn n_series(&self) -> usize {
        self.keys.len()
    }

    pub fn n_days(&self) -> usize {
        self.calendar.len()
    }

    pub fn first_day(&self) -> u32 {
        self.calendar[0].day_index
    }

    pub fn last_day(&self) -> u32 {
        self.calendar[self.calendar.len() - 1].day_index
    }

    pub fn contains_day(&self, day: u32) -> bool {
        day >= self.first_day() && day <= self.last_day()
    }

    /// Column position of `day`. Panics when the day is outside the panel.
    pub fn col(&self, day: u32) -> usize {
        assert!(self.contains_day(day), "day {day} outside panel");
        (day - self.first_day()) as usize
    }

    pub fn day(&self, day: u32) -> &CalendarDay {
        &self.calendar[self.col(day)]
    }

    pub fn sales_at(&self, series: usize, day: u32) -> f64 {
        self.sales[series][self.col(day)]
    }

    pub fn price_at(&self, series: usize, day: u32) -> f64 {
        self.prices[series][self.col(day)]
    }

    /// Series indices grouped by store, stores in first-appearance order.
    pub fn store_groups(&self) -> BTreeMap<String, Vec<usize>> {
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, k) in self.keys.iter().enumerate() {
            groups.entry(k.store_id.clone()).or_default().push(i);
        }
        groups
    }

    /// Copy with the sales matrix replaced. Used by drift injection, which
    /// must hand back a fresh panel without touching the input.
    pub fn with_sales(&self, sales: Vec<Vec<f64>>) -> Result<Panel> {
        Panel::new(self.keys.clone(), self.calendar.clone(), sales, self.prices.clone())
    }
}

/// Restricts the panel to `[start_day, end_day]`. Day indices are kept as-is.
pub fn slice_window(panel: &Panel, start_day: u32, end_day: u32) -> Result<Panel> {
    if start_day > end_day || !panel.contains_day(start_day) || !panel.contains_day(end_day) {
        return Err(Error::validation(format!(
            "window [{start_day}, {end_day}] outside panel [{}, {}]",
            panel.first_day(),
            panel.last_day()
        )));
    }
    let (a, b) = (panel.col(start_day), panel.col(end_day) + 1);
    Ok(Panel {
        keys: panel.keys.clone(),
        calendar: panel.calendar[a..b].to_vec(),
        sales: panel.sales.iter().map(|r| r[a..b].to_vec()).collect(),
        prices: panel.prices.iter().map(|r| r[a..b].to_vec()).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Total,
    State,
    Store,
    Category,
    Department,
    Leaf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Geographic,
    Product,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyNode {
    pub level: Level,
    pub label: String,
    pub children: Vec<NodeId>,
    /// Series under this node, in child order.
    pub leaf_series: Vec<usize>,
}

/// Two parallel trees over the same series: total → state → store → leaf and
/// total → category → department → leaf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hierarchy {
    nodes: Vec<HierarchyNode>,
    geographic_root: NodeId,
    product_root: NodeId,
    n_series: usize,
    fingerprint: u64,
}

fn keys_fingerprint(keys: &[SeriesKey]) -> u64 {
    let mut h = DefaultHasher::new();
    keys.hash(&mut h);
    h.finish()
}

pub fn build_hierarchy(keys: &[SeriesKey]) -> Result<Hierarchy> {
    if keys.is_empty() {
        return Err(Error::validation("cannot build a hierarchy from zero keys"));
    }
    let mut seen = HashSet::new();
    for k in keys {
        if !seen.insert((k.sku_id.as_str(), k.store_id.as_str())) {
            return Err(Error::validation(format!("duplicate series key {}", k.label())));
        }
    }
    let mut store_state: BTreeMap<&str, &str> = BTreeMap::new();
    let mut dept_cat: BTreeMap<&str, &str> = BTreeMap::new();
    for k in keys {
        if let Some(prev) = store_state.insert(&k.store_id, &k.state_id) {
            if prev != k.state_id {
                return Err(Error::validation(format!(
                    "store {} mapped to states {prev} and {}",
                    k.store_id, k.state_id
                )));
            }
        }
        if let Some(prev) = dept_cat.insert(&k.department, &k.category) {
            if prev != k.category {
                return Err(Error::validation(format!(
                    "department {} mapped to categories {prev} and {}",
                    k.department, k.category
                )));
            }
        }
    }

    let mut nodes = Vec::new();
    let geographic_root = build_branch(
        &mut nodes,
        keys,
        (Level::State, |k: &SeriesKey| k.state_id.clone()),
        (Level::Store, |k: &SeriesKey| k.store_id.clone()),
    );
    let product_root = build_branch(
        &mut nodes,
        keys,
        (Level::Category, |k: &SeriesKey| k.category.clone()),
        (Level::Department, |k: &SeriesKey| k.department.clone()),
    );
    Ok(Hierarchy {
        nodes,
        geographic_root,
        product_root,
        n_series: keys.len(),
        fingerprint: keys_fingerprint(keys),
    })
}

type LevelKey = fn(&SeriesKey) -> String;

fn build_branch(
    nodes: &mut Vec<HierarchyNode>,
    keys: &[SeriesKey],
    upper: (Level, LevelKey),
    lower: (Level, LevelKey),
) -> NodeId {
    // BTreeMap ordering makes the tree shape a pure function of the key set.
    let mut grouped: BTreeMap<String, BTreeMap<String, Vec<usize>>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        grouped
            .entry((upper.1)(k))
            .or_default()
            .entry((lower.1)(k))
            .or_default()
            .push(i);
    }
    let push = |nodes: &mut Vec<HierarchyNode>, node: HierarchyNode| {
        nodes.push(node);
        NodeId(nodes.len() - 1)
    };
    let mut upper_ids = Vec::new();
    let mut root_series = Vec::new();
    for (ulabel, lowers) in grouped {
        let mut lower_ids = Vec::new();
        let mut upper_series = Vec::new();
        for (llabel, series) in lowers {
            let leaf_ids: Vec<NodeId> = series
                .iter()
                .map(|&s| {
                    push(
                        nodes,
                        HierarchyNode {
                            level: Level::Leaf,
                            label: keys[s].label(),
                            children: vec![],
                            leaf_series: vec![s],
                        },
                    )
                })
                .collect();
            upper_series.extend_from_slice(&series);
            lower_ids.push(push(
                nodes,
                HierarchyNode {
                    level: lower.0,
                    label: llabel,
                    children: leaf_ids,
                    leaf_series: series,
                },
            ));
        }
        root_series.extend_from_slice(&upper_series);
        upper_ids.push(push(
            nodes,
            HierarchyNode {
                level: upper.0,
                label: ulabel,
                children: lower_ids,
                leaf_series: upper_series,
            },
        ));
    }
    push(
        nodes,
        HierarchyNode {
            level: Level::Total,
            label: "total".to_string(),
            children: upper_ids,
            leaf_series: root_series,
        },
    )
}

impl Hierarchy {
    pub fn root(&self, branch: Branch) -> NodeId {
        match branch {
            Branch::Geographic => self.geographic_root,
            Branch::Product => self.product_root,
        }
    }

    pub fn node(&self, id: NodeId) -> &HierarchyNode {
        &self.nodes[id.0]
    }

    pub fn get(&self, id: NodeId) -> Option<&HierarchyNode> {
        self.nodes.get(id.0)
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_series(&self) -> usize {
        self.n_series
    }

    /// All node ids of one branch in pre-order.
    pub fn branch_nodes(&self, branch: Branch) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![self.root(branch)];
        while let Some(id) = stack.pop() {
            out.push(id);
            stack.extend(self.node(id).children.iter().rev().copied());
        }
        out
    }

    pub fn nodes_at(&self, branch: Branch, level: Level) -> Vec<NodeId> {
        self.branch_nodes(branch)
            .into_iter()
            .filter(|id| self.node(*id).level == level)
            .collect()
    }

    /// Leaf node holding `series` in the given branch.
    pub fn leaf_of(&self, branch: Branch, series: usize) -> Option<NodeId> {
        self.branch_nodes(branch).into_iter().find(|id| {
            let n = self.node(*id);
            n.level == Level::Leaf && n.leaf_series == [series]
        })
    }

    /// Checks that this hierarchy was built from the keys of `panel`.
    pub fn check_panel(&self, panel: &Panel) -> Result<()> {
        if self.n_series != panel.n_series() || self.fingerprint != keys_fingerprint(panel.keys()) {
            return Err(Error::validation(
                "hierarchy was not built from this panel's series keys",
            ));
        }
        Ok(())
    }

    /// Bottom-up fold: leaves take `leaf(series)`, every internal node is the
    /// elementwise sum of its children in child order. Summing children rather
    /// than raw leaves keeps parent == Σ children exact in floating point.
    pub fn fold_bottom_up<F>(&self, id: NodeId, leaf: &F) -> Vec<f64>
    where
        F: Fn(usize) -> Vec<f64>,
    {
        let node = self.node(id);
        if node.level == Level::Leaf {
            return leaf(node.leaf_series[0]);
        }
        let mut acc: Option<Vec<f64>> = None;
        for c in &node.children {
            let v = self.fold_bottom_up(*c, leaf);
            acc = Some(match acc {
                None => v,
                Some(mut a) => {
                    for (x, y) in a.iter_mut().zip(v) {
                        *x += y;
                    }
                    a
                }
            });
        }
        acc.unwrap_or_default()
    }
}

/// Sales of `node` summed over its leaf series, day by day.
pub fn aggregate_series(panel: &Panel, hierarchy: &Hierarchy, node: NodeId) -> Result<Vec<f64>> {
    hierarchy.check_panel(panel)?;
    if hierarchy.get(node).is_none() {
        return Err(Error::validation(format!("node {} not in hierarchy", node.0)));
    }
    Ok(hierarchy.fold_bottom_up(node, &|s| panel.sales()[s].clone()))
}
