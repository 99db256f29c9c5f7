//! Cost accounting: MAC and lookup counts, the speedup estimate, memory
//! footprint, the associativity experiment and the energy identity.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::codebook::{Codebook, Symbol};
use crate::engine::{fold_add, FoldOrder};
use crate::error::{Error, Result};
use crate::lut::{LutSet, SymbolicLayer, SymbolicModel};
use crate::model::{LayerDef, LayerGeometry, LayerKind, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CountMode {
    Macs,
    Lookups,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OpRow {
    pub index: usize,
    pub kind: LayerKind,
    pub input: Vec<usize>,
    pub output: Vec<usize>,
    pub kernel: Option<(usize, usize)>,
    pub stride: usize,
    pub count: u64,
    /// Human-readable product that gives `count`.
    pub formula: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OpCountReport {
    pub mode: CountMode,
    pub patch: usize,
    pub rows: Vec<OpRow>,
    pub total: u64,
    /// Lookups count one multiply and one add lookup per term, so this is
    /// twice `total`; for MACs it equals `total`.
    pub final_total: u64,
}

fn layer_count(g: &LayerGeometry, patch: usize) -> Option<(u64, String)> {
    match g.kind {
        LayerKind::Conv2d => {
            let (kh, kw) = g.kernel?;
            let (kh, kw) = (kh.div_ceil(patch), kw.div_ceil(patch));
            let (c, oc, oh, ow) = (g.input[0], g.output[0], g.output[1], g.output[2]);
            Some((
                (kh * kw * c * oh * ow * oc) as u64,
                format!("{kh}x{kw}x{c}x{oh}x{ow}x{oc}"),
            ))
        }
        LayerKind::Linear => {
            let i: usize = g.input.iter().product();
            let o = g.output[0];
            Some(((i * o) as u64, format!("{i}x{o}")))
        }
        _ => None,
    }
}

fn report(geometry: &[LayerGeometry], mode: CountMode, patch: usize) -> OpCountReport {
    let rows: Vec<OpRow> = geometry
        .iter()
        .filter_map(|g| {
            layer_count(g, patch).map(|(count, formula)| OpRow {
                index: g.index,
                kind: g.kind,
                input: g.input.clone(),
                output: g.output.clone(),
                kernel: g.kernel,
                stride: g.stride,
                count,
                formula,
            })
        })
        .collect();
    let total = rows.iter().map(|r| r.count).sum();
    OpCountReport {
        mode,
        patch,
        rows,
        total,
        final_total: match mode {
            CountMode::Macs => total,
            CountMode::Lookups => 2 * total,
        },
    }
}

/// Multiply-accumulate operations of the float network.
pub fn count_macs(model: &ModelSpec) -> Result<OpCountReport> {
    Ok(report(&model.geometry()?, CountMode::Macs, 1))
}

/// Table lookups of a symbolic network with patch size `patch`.
pub fn count_lookups(model: &SymbolicModel, patch: usize) -> Result<OpCountReport> {
    check_patch(patch)?;
    Ok(report(&model.geometry()?, CountMode::Lookups, patch))
}

/// Lookup counts straight from a float graph (after any layout override),
/// without building codebooks.
pub fn count_lookups_for(model: &ModelSpec, patch: usize) -> Result<OpCountReport> {
    check_patch(patch)?;
    Ok(report(&model.geometry()?, CountMode::Lookups, patch))
}

fn check_patch(patch: usize) -> Result<()> {
    if patch == 0 {
        return Err(Error::InvalidArgument("patch size must be >= 1".into()));
    }
    Ok(())
}

fn shape_str(s: &[usize]) -> String {
    s.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

impl OpCountReport {
    pub fn to_table(&self) -> String {
        let unit = match self.mode {
            CountMode::Macs => "MACs",
            CountMode::Lookups => "Lookups",
        };
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>5}  {:<8}  {:>12}  {:>12}  {:>6}  {:>6}  {:>14}  formula",
            "layer", "type", "input", "output", "kernel", "stride", unit
        );
        for r in &self.rows {
            let kernel = r
                .kernel
                .map_or("-".to_string(), |(h, w)| format!("{h}x{w}"));
            let _ = writeln!(
                out,
                "{:>5}  {:<8}  {:>12}  {:>12}  {:>6}  {:>6}  {:>14}  {}",
                r.index,
                r.kind.to_string(),
                shape_str(&r.input),
                shape_str(&r.output),
                kernel,
                r.stride,
                r.count,
                r.formula
            );
        }
        let _ = writeln!(out, "total {unit}: {}", self.total);
        if self.mode == CountMode::Lookups {
            let _ = writeln!(out, "final lookups (mul + add): {}", self.final_total);
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,type,input,output,kernel,stride,count\n");
        for r in &self.rows {
            let kernel = r.kernel.map_or(String::new(), |(h, w)| format!("{h}x{w}"));
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.index,
                r.kind,
                shape_str(&r.input),
                shape_str(&r.output),
                kernel,
                r.stride,
                r.count
            );
        }
        let _ = writeln!(out, "total,,,,,,{}", self.total);
        let _ = writeln!(out, "final,,,,,,{}", self.final_total);
        out
    }
}

/// Time per MAC (`m`), per multiply lookup (`l`) and per add lookup (`a`),
/// with patch size `p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostParams {
    pub m: f64,
    pub l: f64,
    pub a: f64,
    pub p: u32,
}

impl CostParams {
    pub fn new(m: f64, l: f64, a: f64, p: u32) -> Result<Self> {
        for (name, v) in [("M", m), ("L", l), ("A", a)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if p == 0 {
            return Err(Error::InvalidArgument("P must be >= 1".into()));
        }
        Ok(Self { m, l, a, p })
    }

    /// Parses `M=10,L=2,A=1[,P=1]`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut vals: BTreeMap<String, f64> = BTreeMap::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("expected KEY=VALUE, got `{part}`"))
            })?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad number in `{part}`")))?;
            vals.insert(k.trim().to_ascii_uppercase(), v);
        }
        let get = |k: &str| {
            vals.get(k)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("missing {k} in `{s}`")))
        };
        let p = vals.get("P").copied().unwrap_or(1.0);
        if p.fract() != 0.0 || p < 1.0 {
            return Err(Error::InvalidArgument(format!(
                "P must be a positive integer, got {p}"
            )));
        }
        Self::new(get("M")?, get("L")?, get("A")?, p as u32)
    }
}

/// Estimated speedup of lookups over MACs: P^2 * M / (L + A).
pub fn speedup(params: &CostParams) -> f64 {
    let p = params.p as f64;
    p * p * params.m / (params.l + params.a)
}

/// Energy in joules from average power (W) and latency (s).
pub fn energy(power_watts: f64, latency_seconds: f64) -> Result<f64> {
    if !(power_watts >= 0.0 && latency_seconds >= 0.0)
        || !power_watts.is_finite()
        || !latency_seconds.is_finite()
    {
        return Err(Error::InvalidArgument(format!(
            "power and latency must be finite and non-negative, got {power_watts} W, {latency_seconds} s"
        )));
    }
    Ok(power_watts * latency_seconds)
}

/// Parses `P=1.2,t=0.05` and returns the energy.
pub fn parse_energy(s: &str) -> Result<f64> {
    let mut p = None;
    let mut t = None;
    for part in s.split(',').map(str::trim).filter(|x| !x.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("expected KEY=VALUE, got `{part}`")))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad number in `{part}`")))?;
        match k.trim() {
            "P" | "p" => p = Some(v),
            "t" | "T" => t = Some(v),
            other => return Err(Error::InvalidArgument(format!("unknown key `{other}`"))),
        }
    }
    match (p, t) {
        (Some(p), Some(t)) => energy(p, t),
        _ => Err(Error::InvalidArgument(format!(
            "need both P and t in `{s}`"
        ))),
    }
}

/// Smallest whole number of bytes holding ids `0..k`.
pub fn symbol_width(k: usize) -> usize {
    if k <= 256 {
        1
    } else {
        2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FootprintGroup {
    MainLut,
    FilterLut,
    BiasLut,
    FloatFilter,
    FloatBias,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FootprintItem {
    pub group: FootprintGroup,
    pub name: String,
    pub entries: u64,
    /// Bytes as stored: symbol width for symbol tables, 8 for centroids, 4
    /// for float parameters.
    pub bytes: u64,
    pub bytes_w1: u64,
    pub bytes_w2: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FootprintReport {
    pub symbol_width: usize,
    pub diet: Vec<FootprintItem>,
    pub float: Vec<FootprintItem>,
    pub diet_bytes: u64,
    pub float_bytes: u64,
}

const CENTROID_BYTES: u64 = 8;
const FLOAT_BYTES: u64 = 4;

fn sym_item(group: FootprintGroup, name: String, entries: usize, width: usize) -> FootprintItem {
    let entries = entries as u64;
    FootprintItem {
        group,
        name,
        entries,
        bytes: entries * width as u64,
        bytes_w1: entries,
        bytes_w2: entries * 2,
    }
}

fn param_name(kind: LayerKind, ordinal: usize) -> String {
    match kind {
        LayerKind::Conv2d => format!("c{ordinal}"),
        _ => format!("f{ordinal}"),
    }
}

/// Itemized storage of the float model against the diet model.
///
/// Diet items are the five main tables (conv multiply, FC multiply, add,
/// activation, activation centroids), one symbolic filter table and one
/// bias table per parameterized layer. Symbol tables are counted at one
/// width for the whole model, the one the bundle format uses.
pub fn footprint(model: &ModelSpec, sym: &SymbolicModel) -> FootprintReport {
    let luts = sym.luts();
    let k = luts.n_clusters();
    let width = symbol_width(k.max(luts.n_cfilters()).max(luts.n_ffilters()));
    let act_kinds = sym
        .layers()
        .iter()
        .filter_map(|l| match l {
            SymbolicLayer::Activation(a) => Some(*a),
            _ => None,
        })
        .collect::<std::collections::BTreeSet<_>>()
        .len()
        .max(1);

    let mut diet = vec![
        sym_item(
            FootprintGroup::MainLut,
            "conv_lut".into(),
            k * luts.n_cfilters(),
            width,
        ),
        sym_item(
            FootprintGroup::MainLut,
            "fc_lut".into(),
            k * luts.n_ffilters(),
            width,
        ),
        sym_item(FootprintGroup::MainLut, "add_lut".into(), k * k, width),
        sym_item(
            FootprintGroup::MainLut,
            "act_lut".into(),
            k * act_kinds,
            width,
        ),
        FootprintItem {
            group: FootprintGroup::MainLut,
            name: "centroid_lut".into(),
            entries: k as u64,
            bytes: k as u64 * CENTROID_BYTES,
            bytes_w1: k as u64 * CENTROID_BYTES,
            bytes_w2: k as u64 * CENTROID_BYTES,
        },
    ];

    let (mut conv_i, mut fc_i) = (0, 0);
    let mut bias_items = Vec::new();
    for layer in sym.layers() {
        let (weight, bias, kind) = match layer {
            SymbolicLayer::Conv2d { weight, bias, .. } => (weight, bias, LayerKind::Conv2d),
            SymbolicLayer::Linear { weight, bias } => (weight, bias, LayerKind::Linear),
            _ => continue,
        };
        let ordinal = if kind == LayerKind::Conv2d {
            conv_i += 1;
            conv_i
        } else {
            fc_i += 1;
            fc_i
        };
        let name = param_name(kind, ordinal);
        diet.push(sym_item(
            FootprintGroup::FilterLut,
            format!("{name}_sym_filter"),
            weight.len(),
            width,
        ));
        if let Some(b) = bias {
            let t = &luts.bias_tables()[*b];
            bias_items.push(sym_item(
                FootprintGroup::BiasLut,
                format!("{name}b_lut"),
                t.table.len(),
                width,
            ));
        }
    }
    diet.extend(bias_items);

    let mut float = Vec::new();
    let (mut conv_i, mut fc_i) = (0, 0);
    let mut float_bias = Vec::new();
    for layer in model.layers() {
        let (w, b, kind) = match layer {
            LayerDef::Conv2d(c) => (
                c.weight.len(),
                c.bias.as_ref().map(|b| b.len()),
                LayerKind::Conv2d,
            ),
            LayerDef::Linear(l) => (
                l.weight.len(),
                l.bias.as_ref().map(|b| b.len()),
                LayerKind::Linear,
            ),
            _ => continue,
        };
        let ordinal = if kind == LayerKind::Conv2d {
            conv_i += 1;
            conv_i
        } else {
            fc_i += 1;
            fc_i
        };
        let name = param_name(kind, ordinal);
        let item = |group, name: String, n: usize| FootprintItem {
            group,
            name,
            entries: n as u64,
            bytes: n as u64 * FLOAT_BYTES,
            bytes_w1: n as u64 * FLOAT_BYTES,
            bytes_w2: n as u64 * FLOAT_BYTES,
        };
        float.push(item(FootprintGroup::FloatFilter, format!("{name}f"), w));
        if let Some(n) = b {
            float_bias.push(item(FootprintGroup::FloatBias, format!("{name}b"), n));
        }
    }
    float.extend(float_bias);

    FootprintReport {
        symbol_width: width,
        diet_bytes: diet.iter().map(|i| i.bytes).sum(),
        float_bytes: float.iter().map(|i| i.bytes).sum(),
        diet,
        float,
    }
}

fn human_bytes(b: u64) -> String {
    const KB: f64 = 1024.0;
    let b = b as f64;
    if b < KB {
        format!("{b} B")
    } else if b < KB * KB {
        format!("{:.1} KB", b / KB)
    } else {
        format!("{:.2} MB", b / (KB * KB))
    }
}

impl FootprintReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<11}  {:<16}  {:>12}  {:>12}  {:>12}  {:>12}",
            "group", "item", "entries", "bytes", "bytes@1B", "bytes@2B"
        );
        for i in self.diet.iter().chain(&self.float) {
            let _ = writeln!(
                out,
                "{:<11}  {:<16}  {:>12}  {:>12}  {:>12}  {:>12}",
                format!("{:?}", i.group),
                i.name,
                i.entries,
                i.bytes,
                i.bytes_w1,
                i.bytes_w2
            );
        }
        let _ = writeln!(
            out,
            "diet total: {} ({}), symbol width {} B",
            self.diet_bytes,
            human_bytes(self.diet_bytes),
            self.symbol_width
        );
        let _ = writeln!(
            out,
            "float total: {} ({})",
            self.float_bytes,
            human_bytes(self.float_bytes)
        );
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,item,entries,bytes,bytes_w1,bytes_w2\n");
        for i in self.diet.iter().chain(&self.float) {
            let _ = writeln!(
                out,
                "{:?},{},{},{},{},{}",
                i.group, i.name, i.entries, i.bytes, i.bytes_w1, i.bytes_w2
            );
        }
        let _ = writeln!(out, "DietTotal,,,{},,", self.diet_bytes);
        let _ = writeln!(out, "FloatTotal,,,{},,", self.float_bytes);
        out
    }
}

/// How the symbols of an associativity trial are drawn.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub enum SymbolDraw {
    /// Uniform over the whole codebook.
    #[default]
    Uniform,
    /// Uniform over symbols with |centroid| <= R / sqrt(n), where R is the
    /// smaller of |min centroid| and max centroid. Keeps a symmetric
    /// codebook's exact sum in range; a lopsided one can still saturate.
    Bounded,
    /// |centroid| <= R / n: no partial sum of any ordering can leave the
    /// range.
    Strict,
}

impl std::str::FromStr for SymbolDraw {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(SymbolDraw::Uniform),
            "bounded" => Ok(SymbolDraw::Bounded),
            "strict" => Ok(SymbolDraw::Strict),
            other => Err(Error::InvalidArgument(format!(
                "unknown symbol draw `{other}` (uniform, bounded, strict)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AssocConfig {
    pub n_symbols: usize,
    pub permutations: usize,
    pub seed: u64,
    /// Size of the neighbourhood that counts as "near".
    pub near_k: usize,
    pub draw: SymbolDraw,
}

impl Default for AssocConfig {
    fn default() -> Self {
        Self {
            n_symbols: 840,
            permutations: 1000,
            seed: 0,
            near_k: 5,
            draw: SymbolDraw::Uniform,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AssocClass {
    Same,
    Near,
    Far,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssocReport {
    pub n_symbols: usize,
    pub permutations: usize,
    pub same: usize,
    pub near: usize,
    pub far: usize,
    pub expected: Symbol,
    pub expected_value: f64,
    /// Exact sum of the decoded symbols, before encoding.
    pub exact_sum: f64,
    /// |id(result) - id(expected)| -> number of permutations. Ids are in
    /// centroid order, so this is a rank distance.
    pub histogram: BTreeMap<usize, usize>,
    pub classes: Vec<AssocClass>,
}

fn draw_symbols(cb: &Codebook, cfg: &AssocConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Symbol>> {
    let candidates: Vec<Symbol> = match cfg.draw {
        SymbolDraw::Uniform => (0..cb.len() as u16).map(Symbol).collect(),
        SymbolDraw::Bounded | SymbolDraw::Strict => {
            let c = cb.centroids();
            let range = (-c[0]).min(c[c.len() - 1]).max(0.0);
            let n = cfg.n_symbols as f64;
            let bound = if cfg.draw == SymbolDraw::Strict {
                range / n
            } else {
                range / n.sqrt()
            };
            (0..cb.len())
                .filter(|&i| c[i].abs() <= bound)
                .map(|i| Symbol(i as u16))
                .collect()
        }
    };
    if candidates.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no codebook symbols eligible for a {:?} draw of {} symbols",
            cfg.draw, cfg.n_symbols
        )));
    }
    Ok((0..cfg.n_symbols)
        .map(|_| candidates[rng.gen_range(0..candidates.len())])
        .collect())
}

/// Draws `n_symbols` symbols, then folds `permutations` random orderings of
/// them through the add table and compares each result with the encoded
/// exact sum.
pub fn assoc_experiment(cb: &Codebook, luts: &LutSet, cfg: &AssocConfig) -> Result<AssocReport> {
    if cfg.n_symbols == 0 || cfg.permutations == 0 {
        return Err(Error::InvalidArgument(
            "associativity experiment needs at least one symbol and one permutation".into(),
        ));
    }
    if luts.n_clusters() != cb.len() {
        return Err(Error::InvalidArgument(
            "codebook does not match the add table".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let symbols = draw_symbols(cb, cfg, &mut rng)?;
    let exact_sum: f64 = symbols.iter().map(|&s| cb.value(s)).sum();
    let expected = cb.encode(exact_sum);
    let expected_value = cb.value(expected);
    let near = cb.nearest_k(expected_value, cfg.near_k.min(cb.len()))?;

    let results: Vec<Symbol> = (0..cfg.permutations)
        .into_par_iter()
        .map(|p| {
            let mut order = symbols.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(
                cfg.seed ^ (p as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15),
            );
            order.shuffle(&mut rng);
            fold_add(&order, luts, FoldOrder::ChannelMajorRaster)
        })
        .collect::<Result<_>>()?;

    let mut histogram = BTreeMap::new();
    let mut classes = Vec::with_capacity(results.len());
    for &r in &results {
        *histogram.entry(r.id().abs_diff(expected.id())).or_insert(0) += 1;
        classes.push(if r == expected {
            AssocClass::Same
        } else if near.contains(&r) {
            AssocClass::Near
        } else {
            AssocClass::Far
        });
    }
    let count = |c| classes.iter().filter(|&&x| x == c).count();
    Ok(AssocReport {
        n_symbols: cfg.n_symbols,
        permutations: cfg.permutations,
        same: count(AssocClass::Same),
        near: count(AssocClass::Near),
        far: count(AssocClass::Far),
        expected,
        expected_value,
        exact_sum,
        histogram,
        classes,
    })
}

impl AssocReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "n_symbols,permutations,same,near,far,expected_symbol,expected_value,exact_sum\n",
        );
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            self.n_symbols,
            self.permutations,
            self.same,
            self.near,
            self.far,
            self.expected,
            self.expected_value,
            self.exact_sum
        );
        out.push_str("\nrank_distance,permutations\n");
        for (d, n) in &self.histogram {
            let _ = writeln!(out, "{d},{n}");
        }
        out
    }

    pub fn to_table(&self) -> String {
        format!(
            "{:>9}  {:>12}  {:>5}  {:>5}  {:>5}\n{:>9}  {:>12}  {:>5}  {:>5}  {:>5}\n",
            "# symbols",
            "permutations",
            "same",
            "near",
            "far",
            self.n_symbols,
            self.permutations,
            self.same,
            self.near,
            self.far
        )
    }
}
