//! Builds the LP/MILP models: single-neuron big-M blocks, bound-tightening
//! models up to a target neuron, and adversarial verification models, plus
//! an LP-format text exporter.
//!
//! Per ReLU neuron the encoding splits the pre-activation into positive and
//! negative parts, `a = h - hbar`, and gates them with a binary `z`:
//! `h <= max(0, ub) z` and `hbar <= max(0, -lb) (1 - z)`. Using the
//! clipped constants instead of raw `ub`/`-lb` is valid because
//! `h, hbar >= 0`, and it makes stably active/inactive neurons linear even
//! in the relaxation.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::model::{argmax, ModelError, Network};
use crate::propagate::{BoundStatus, BoundsSet};

#[derive(Debug, thiserror::Error)]
pub enum BuildError {
    #[error("bounds for layer {0} are required but missing")]
    BoundsUnavailable(usize),
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("invalid neuron bounds: lb {lb} exceeds ub {ub}")]
    InvalidBounds { lb: f64, ub: f64 },
    #[error("target class {0} equals the reference class")]
    TargetEqualsReference(usize),
    #[error("reference input leaves the network's input box at coordinate {0}")]
    ReferenceOutsideBox(usize),
    #[error("perturbation radius must be nonnegative, got {0}")]
    NegativeRadius(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintSense {
    Le,
    Eq,
    Ge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjSense {
    Maximize,
    Minimize,
}

/// Semantic identity of a model column. Layers are 1-based, neurons
/// 0-based; `Display` yields the exported variable name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum VarKey {
    /// Network input `x_j`.
    Input(usize),
    /// Pre-activation `a_j` of a layer.
    Pre { layer: usize, neuron: usize },
    /// Positive part / post-activation `h_j` of a ReLU layer.
    Post { layer: usize, neuron: usize },
    /// Negative part `hbar_j` of a ReLU layer.
    Neg { layer: usize, neuron: usize },
    /// ReLU on/off indicator `z_j`.
    Indicator { layer: usize, neuron: usize },
}

impl fmt::Display for VarKey {
    fmt::Display::fmt as _;
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VarKey::Input(j) => write!(f, "x_{j}"),
            VarKey::Pre { layer, neuron } => write!(f, "a_{layer}_{neuron}"),
            VarKey::Post { layer, neuron } => write!(f, "h_{layer}_{neuron}"),
            VarKey::Neg { layer, neuron } => write!(f, "hbar_{layer}_{neuron}"),
            VarKey::Indicator { layer, neuron } => write!(f, "z_{layer}_{neuron}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Var {
    pub name: String,
    pub lb: f64,
    pub ub: f64,
    pub kind: VarKind,
}

/// One sparse linear row `sum(coef * var) <sense> rhs`.
#[derive(Debug, Clone)]
pub struct LinearRow {
    pub terms: Vec<(usize, f64)>,
    pub sense: ConstraintSense,
    pub rhs: f64,
}

/// A mixed-integer linear model with box-bounded variables.
#[derive(Debug, Clone)]
pub struct MilpModel {
    pub name: String,
    pub vars: Vec<Var>,
    pub rows: Vec<LinearRow>,
    pub objective: Vec<(usize, f64)>,
    pub obj_sense: ObjSense,
    pub var_index: BTreeMap<VarKey, usize>,
}

impl MilpModel {
    pub fn new(name: impl Into<String>, obj_sense: ObjSense) -> MilpModel {
        MilpModel {
            name: name.into(),
            vars: Vec::new(),
            rows: Vec::new(),
            objective: Vec::new(),
            obj_sense,
            var_index: BTreeMap::new(),
        }
    }

    pub fn add_var(&mut self, key: VarKey, lb: f64, ub: f64, kind: VarKind) -> usize {
        debug_assert!(lb <= ub, "variable {key} with lb {lb} > ub {ub}");
        let idx = self.vars.len();
        self.vars.push(Var {
            name: key.to_string(),
            lb,
            ub,
            kind,
        });
        self.var_index.insert(key, idx);
        idx
    }

    pub fn add_row(&mut self, terms: Vec<(usize, f64)>, sense: ConstraintSense, rhs: f64) {
        debug_assert!(terms.iter().all(|(i, c)| *i < self.vars.len() && c.is_finite()));
        self.rows.push(LinearRow { terms, sense, rhs });
    }

    /// Shrinks a variable's box to a point.
    pub fn fix_var(&mut self, idx: usize, value: f64) {
        self.vars[idx].lb = value;
        self.vars[idx].ub = value;
    }

    pub fn var(&self, key: VarKey) -> Option<usize> {
        self.var_index.get(&key).copied()
    }

    /// Column indices of binary variables, in declaration order.
    pub fn binary_vars(&self) -> Vec<usize> {
        self.vars
            .iter()
            .enumerate()
            .filter(|(_, v)| v.kind == VarKind::Binary)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn objective_value(&self, point: &[f64]) -> f64 {
        self.objective.iter().map(|(i, c)| c * point[*i]).sum()
    }

    /// Largest constraint or bound violation of `point`.
    pub fn max_violation(&self, point: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (v, x) in self.vars.iter().zip(point) {
            worst = worst.max(v.lb - x).max(x - v.ub);
        }
        for row in &self.rows {
            let lhs: f64 = row.terms.iter().map(|(i, c)| c * point[*i]).sum();
            let viol = match row.sense {
                ConstraintSense::Le => lhs - row.rhs,
                ConstraintSense::Ge => row.rhs - lhs,
                ConstraintSense::Eq => (lhs - row.rhs).abs(),
            };
            worst = worst.max(viol);
        }
        worst
    }
}

/// Knobs shared by the model builders.
#[derive(Debug, Clone, Copy)]
pub struct FormulateOptions {
    /// Absolute widening applied to solver-produced bounds before they are
    /// used as big-M constants, guarding against solver-tolerance
    /// unsoundness. Closed-form bounds are never widened.
    pub bound_margin: f64,
    /// Fix `z` (and the matching part variable) when a neuron's bound sign
    /// already decides its state. The fixings are implied by valid bounds,
    /// so they never change optima.
    pub stable_fixing: bool,
}

impl Default for FormulateOptions {
    fn default() -> FormulateOptions {
        FormulateOptions {
            bound_margin: 0.0,
            stable_fixing: true,
        }
    }
}

/// Appends the big-M rows tying one neuron's `a`, `h`, `hbar`, and `z`
/// together: `a = h - hbar`, `h <= max(0, ub) z`,
/// `hbar <= max(0, -lb) (1 - z)`. With `relax` the indicator stays a
/// continuous variable in `[0, 1]`.
///
/// Stably decided neurons (`ub <= 0` or `lb >= 0`) get their indicator and
/// the vanishing part variable fixed by bound changes; no row is dropped.
#[allow(clippy::too_many_arguments)]
pub fn relu_block(
    model: &mut MilpModel,
    a_var: usize,
    h_var: usize,
    hbar_var: usize,
    z_var: usize,
    lb: f64,
    ub: f64,
    relax: bool,
    opts: &FormulateOptions,
) -> Result<(), BuildError> {
    if lb > ub {
        return Err(BuildError::InvalidBounds { lb, ub });
    }
    let up = ub.max(0.0);
    let down = (-lb).max(0.0);
    model.vars[z_var].kind = if relax {
        VarKind::Continuous
    } else {
        VarKind::Binary
    };
    model.add_row(
        vec![(a_var, 1.0), (h_var, -1.0), (hbar_var, 1.0)],
        ConstraintSense::Eq,
        0.0,
    );
    model.add_row(vec![(h_var, 1.0), (z_var, -up)], ConstraintSense::Le, 0.0);
    model.add_row(
        vec![(hbar_var, 1.0), (z_var, down)],
        ConstraintSense::Le,
        down,
    );
    if opts.stable_fixing {
        if ub <= 0.0 {
            model.fix_var(z_var, 0.0);
            model.fix_var(h_var, 0.0);
        } else if lb >= 0.0 {
            model.fix_var(z_var, 1.0);
            model.fix_var(hbar_var, 0.0);
        }
    }
    Ok(())
}

fn widened(bounds: &BoundsSet, layer: usize, neuron: usize, margin: f64) -> (f64, f64) {
    let lb = bounds.layer(layer).lb[neuron];
    let ub = bounds.layer(layer).ub[neuron];
    if margin > 0.0 && bounds.layer(layer).status[neuron] != BoundStatus::ClosedForm {
        (lb - margin, ub + margin)
    } else {
        (lb, ub)
    }
}

/// Declares layer `l`'s variables and rows (affine map from the previous
/// layer plus one ReLU block per neuron), given the previous layer's
/// column indices and post-activation boxes. Returns this layer's `h`
/// indices and boxes.
#[allow(clippy::too_many_arguments)]
fn encode_relu_layer(
    model: &mut MilpModel,
    net: &Network,
    bounds: &BoundsSet,
    layer: usize,
    prev_vars: &[usize],
    prev_lo: &[f64],
    prev_hi: &[f64],
    relax: bool,
    opts: &FormulateOptions,
) -> Result<(Vec<usize>, Vec<f64>, Vec<f64>), BuildError> {
    if bounds.layers.len() < layer {
        return Err(BuildError::BoundsUnavailable(layer));
    }
    let spec = &net.layers[layer - 1];
    let width = spec.width();
    let mut h_vars = Vec::with_capacity(width);
    let mut h_lo = Vec::with_capacity(width);
    let mut h_hi = Vec::with_capacity(width);
    for neuron in 0..width {
        let (lb, ub) = widened(bounds, layer, neuron, opts.bound_margin);
        if lb > ub {
            return Err(BuildError::InvalidBounds { lb, ub });
        }
        let up = ub.max(0.0);
        let down = (-lb).max(0.0);
        // The variable boxes below are all implied by the rows, so they
        // never tighten the relaxation; they only keep every column
        // finitely bounded.
        let a = model.add_var(
            VarKey::Pre { layer, neuron },
            -down,
            up,
            VarKind::Continuous,
        );
        let h = model.add_var(VarKey::Post { layer, neuron }, 0.0, up, VarKind::Continuous);
        let hbar = model.add_var(VarKey::Neg { layer, neuron }, 0.0, down, VarKind::Continuous);
        let z = model.add_var(
            VarKey::Indicator { layer, neuron },
            0.0,
            1.0,
            VarKind::Binary,
        );
        add_affine_row(model, a, &spec.weights[neuron], spec.bias[neuron], prev_vars);
        relu_block(model, a, h, hbar, z, lb, ub, relax, opts)?;
        h_vars.push(h);
        h_lo.push(0.0);
        h_hi.push(up);
    }
    let _ = (prev_lo, prev_hi);
    Ok((h_vars, h_lo, h_hi))
}

/// `a - sum_k w_k prev_k = b`; zero weights are skipped.
fn add_affine_row(model: &mut MilpModel, a: usize, row: &[f64], bias: f64, prev: &[usize]) {
    let mut terms = vec![(a, 1.0)];
    for (w, var) in row.iter().zip(prev) {
        if *w != 0.0 {
            terms.push((*var, -w));
        }
    }
    model.add_row(terms, ConstraintSense::Eq, bias);
}

/// Interval range of `w . prev + b` over the previous layer's boxes.
fn affine_range(row: &[f64], bias: f64, lo: &[f64], hi: &[f64]) -> (f64, f64) {
    let mut a = bias;
    let mut b = bias;
    for (w, (l, h)) in row.iter().zip(lo.iter().zip(hi)) {
        if *w >= 0.0 {
            a += w * l;
            b += w * h;
        } else {
            a += w * h;
            b += w * l;
        }
    }
    (a, b)
}

fn declare_inputs(model: &mut MilpModel, lo: &[f64], hi: &[f64]) -> Vec<usize> {
    lo.iter()
        .zip(hi)
        .enumerate()
        .map(|(j, (l, h))| model.add_var(VarKey::Input(j), *l, *h, VarKind::Continuous))
        .collect()
}

/// Builds the bound-tightening model for neuron `neuron` (0-based) of
/// layer `layer` (1-based): the network encoded through layer
/// `layer - 1`, inputs boxed, objective `a_neuron` at `layer` under
/// `sense`. With `relax` every indicator is continuous, yielding the LP
/// whose optimum is the weak bound.
pub fn build_obbt(
    net: &Network,
    bounds: &BoundsSet,
    layer: usize,
    neuron: usize,
    sense: ObjSense,
    relax: bool,
    opts: &FormulateOptions,
) -> Result<MilpModel, BuildError> {
    if layer == 0 || layer > net.depth() {
        return Err(BuildError::IndexOutOfRange(format!(
            "layer {layer} of a depth-{} network",
            net.depth()
        )));
    }
    if neuron >= net.layer_width(layer) {
        return Err(BuildError::IndexOutOfRange(format!(
            "neuron {neuron} of layer {layer} (width {})",
            net.layer_width(layer)
        )));
    }
    let mut model = MilpModel::new(
        format!("obbt_{}_l{layer}_n{neuron}", net.name),
        sense,
    );
    let mut prev_vars = declare_inputs(&mut model, &net.input_lb, &net.input_ub);
    let mut prev_lo = net.input_lb.clone();
    let mut prev_hi = net.input_ub.clone();
    for l in 1..layer {
        let (h, lo, hi) = encode_relu_layer(
            &mut model, net, bounds, l, &prev_vars, &prev_lo, &prev_hi, relax, opts,
        )?;
        prev_vars = h;
        prev_lo = lo;
        prev_hi = hi;
    }
    let spec = &net.layers[layer - 1];
    let (lo, hi) = affine_range(&spec.weights[neuron], spec.bias[neuron], &prev_lo, &prev_hi);
    let a = model.add_var(
        VarKey::Pre { layer, neuron },
        lo,
        hi,
        VarKind::Continuous,
    );
    add_affine_row(
        &mut model,
        a,
        &spec.weights[neuron],
        spec.bias[neuron],
        &prev_vars,
    );
    model.objective = vec![(a, 1.0)];
    Ok(model)
}

/// Which output classes a verification run attacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    AllClasses,
    Single(usize),
}

/// Configuration of one verification experiment.
#[derive(Debug, Clone)]
pub struct VerifyConfig {
    /// Reference input; must lie inside the network's input box.
    pub x0: Vec<f64>,
    /// Infinity-norm perturbation budget.
    pub radius: f64,
    pub target: Target,
    /// Per-target-class solve limit in seconds.
    pub time_limit: f64,
}

impl VerifyConfig {
    pub fn new(x0: Vec<f64>, radius: f64) -> VerifyConfig {
        VerifyConfig {
            x0,
            radius,
            target: Target::AllClasses,
            time_limit: f64::INFINITY,
        }
    }
}

/// Reference class of `x0`: argmax of the logits, ties to lowest index.
pub fn reference_class(net: &Network, x0: &[f64]) -> Result<usize, BuildError> {
    let acts = net.forward(x0)?;
    Ok(argmax(acts.output()))
}

/// Builds the adversarial model for `target`: the full network encoded
/// over the perturbation box (the radius ball clipped to the input box),
/// maximizing the logit difference `a_target - a_reference`.
///
/// A positive optimum means an adversarial input for `target` exists.
pub fn build_verification(
    net: &Network,
    bounds: &BoundsSet,
    cfg: &VerifyConfig,
    target: usize,
    opts: &FormulateOptions,
) -> Result<MilpModel, BuildError> {
    if cfg.radius < 0.0 {
        return Err(BuildError::NegativeRadius(cfg.radius));
    }
    if cfg.x0.len() != net.input_dim {
        return Err(BuildError::Model(ModelError::DimensionMismatch(format!(
            "x0 has length {}, expected {}",
            cfg.x0.len(),
            net.input_dim
        ))));
    }
    for (j, x) in cfg.x0.iter().enumerate() {
        if *x < net.input_lb[j] || *x > net.input_ub[j] {
            return Err(BuildError::ReferenceOutsideBox(j));
        }
    }
    let depth = net.depth();
    let out_width = net.layer_width(depth);
    if target >= out_width {
        return Err(BuildError::IndexOutOfRange(format!(
            "target class {target} of {out_width}"
        )));
    }
    let reference = reference_class(net, &cfg.x0)?;
    if target == reference {
        return Err(BuildError::TargetEqualsReference(target));
    }
    if bounds.layers.len() < depth.saturating_sub(1) {
        return Err(BuildError::BoundsUnavailable(depth - 1));
    }

    let lo: Vec<f64> = cfg
        .x0
        .iter()
        .zip(&net.input_lb)
        .map(|(x, lb)| (x - cfg.radius).max(*lb))
        .collect();
    let hi: Vec<f64> = cfg
        .x0
        .iter()
        .zip(&net.input_ub)
        .map(|(x, ub)| (x + cfg.radius).min(*ub))
        .collect();

    let mut model = MilpModel::new(
        format!("verify_{}_c{reference}_t{target}", net.name),
        ObjSense::Maximize,
    );
    let mut prev_vars = declare_inputs(&mut model, &lo, &hi);
    let mut prev_lo = lo;
    let mut prev_hi = hi;
    for l in 1..depth {
        let (h, plo, phi) = encode_relu_layer(
            &mut model, net, bounds, l, &prev_vars, &prev_lo, &prev_hi, false, opts,
        )?;
        prev_vars = h;
        prev_lo = plo;
        prev_hi = phi;
    }
    let spec = &net.layers[depth - 1];
    let mut out_vars = Vec::with_capacity(out_width);
    for neuron in 0..out_width {
        let (alo, ahi) = affine_range(&spec.weights[neuron], spec.bias[neuron], &prev_lo, &prev_hi);
        let a = model.add_var(
            VarKey::Pre {
                layer: depth,
                neuron,
            },
            alo,
            ahi,
            VarKind::Continuous,
        );
        add_affine_row(
            &mut model,
            a,
            &spec.weights[neuron],
            spec.bias[neuron],
            &prev_vars,
        );
        out_vars.push(a);
    }
    model.objective = vec![(out_vars[target], 1.0), (out_vars[reference], -1.0)];
    Ok(model)
}

/// Full variable assignment induced by evaluating the network at `x`:
/// `h` takes the post-activations, `hbar` the negative parts, and each
/// indicator the on/off state of its neuron (clamped into the variable's
/// box, which matters only for ties at zero). The point satisfies every
/// model row whenever the bounds baked into the model are valid.
pub fn witness_assignment(
    model: &MilpModel,
    net: &Network,
    x: &[f64],
) -> Result<Vec<f64>, BuildError> {
    let acts = net.forward(x)?;
    let mut point = vec![0.0; model.vars.len()];
    for (key, idx) in &model.var_index {
        let value = match key {
            VarKey::Input(j) => x[*j],
            VarKey::Pre { layer, neuron } => acts.pre[layer - 1][*neuron],
            VarKey::Post { layer, neuron } => acts.post[layer - 1][*neuron],
            VarKey::Neg { layer, neuron } => (-acts.pre[layer - 1][*neuron]).max(0.0),
            VarKey::Indicator { layer, neuron } => {
                let on = if acts.pre[layer - 1][*neuron] >= 0.0 {
                    1.0
                } else {
                    0.0
                };
                let v = &model.vars[*idx];
                on.clamp(v.lb, v.ub)
            }
        };
        point[*idx] = value;
    }
    Ok(point)
}

fn fmt_coef(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes the model in LP text format (Maximize/Minimize, Subject To,
/// Bounds, Binaries, End) with 17-significant-digit coefficients and
/// deterministic ordering.
pub fn write_lp(model: &MilpModel, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "\\ {}", model.name)?;
    writeln!(
        out,
        "{}",
        match model.obj_sense {
            ObjSense::Maximize => "Maximize",
            ObjSense::Minimize => "Minimize",
        }
    )?;
    write!(out, " obj:")?;
    for (i, c) in &model.objective {
        write!(out, " {} {} {}", sign(*c), fmt_coef(c.abs()), model.vars[*i].name)?;
    }
    writeln!(out)?;
    writeln!(out, "Subject To")?;
    for (r, row) in model.rows.iter().enumerate() {
        write!(out, " c{r}:")?;
        for (i, c) in &row.terms {
            write!(out, " {} {} {}", sign(*c), fmt_coef(c.abs()), model.vars[*i].name)?;
        }
        let op = match row.sense {
            ConstraintSense::Le => "<=",
            ConstraintSense::Eq => "=",
            ConstraintSense::Ge => ">=",
        };
        writeln!(out, " {op} {}", fmt_coef(row.rhs))?;
    }
    writeln!(out, "Bounds")?;
    for v in &model.vars {
        match (v.lb.is_finite(), v.ub.is_finite()) {
            (true, true) if v.lb == v.ub => writeln!(out, " {} = {}", v.name, fmt_coef(v.lb))?,
            (true, true) => writeln!(
                out,
                " {} <= {} <= {}",
                fmt_coef(v.lb),
                v.name,
                fmt_coef(v.ub)
            )?,
            (true, false) => writeln!(out, " {} >= {}", v.name, fmt_coef(v.lb))?,
            (false, true) => writeln!(out, " -infinity <= {} <= {}", v.name, fmt_coef(v.ub))?,
            (false, false) => writeln!(out, " {} free", v.name)?,
        }
    }
    let binaries = model.binary_vars();
    if !binaries.is_empty() {
        writeln!(out, "Binaries")?;
        write!(out, " ")?;
        for idx in &binaries {
            write!(out, "{} ", model.vars[*idx].name)?;
        }
        writeln!(out)?;
    }
    writeln!(out, "End")?;
    Ok(())
}

fn sign(c: f64) -> char {
    if c.is_sign_negative() {
        '-'
    } else {
        '+'
    }
}

/// Writes the model to `path` in LP text format; byte output is
/// deterministic for a fixed model.
pub fn export_lp(model: &MilpModel, path: impl AsRef<Path>) -> Result<(), BuildError> {
    let mut buf = Vec::new();
    write_lp(model, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}
