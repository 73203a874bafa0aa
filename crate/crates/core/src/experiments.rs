//! Scripted experiments. A JSON config names a command and its parameters;
//! a run writes `summary.json` plus CSV tables into the output directory.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::construction::{
    build_bubble, build_phi1, build_phi2, budget_chain, find_antipodal_pair, select_delta, BubbleSpec,
    ConstructionPlan, Phi1Spec, Phi2Spec, Pipeline, SeparationRule, PAIR_TOL,
};
use crate::degree::degree_regular_value;
use crate::error::{Error, Result};
use crate::estimates::{bubble_budget, i1_bound, i1_quadrature, i2_quadrature, phi1_h1_bound, AnnulusBoundForm};
use crate::functionals::{
    adapted_grid, boundary_energy, cap_degree_integral, degree_integral, diff_support_area, image_area, max_grad_sq,
    w1p_dist,
};
use crate::lattice::{BallField, BallLattice, FieldMeta};
use crate::maps::{BubbleProfile, CapResolution, Orientation, Patch, SphereMap};
use crate::minimizer::{minimize, SolverConfig};
use crate::output::{write_json, Cell, Table};
use crate::quadrature::{CapGridSpec, RadialSegment, SphereQuadGrid};
use crate::singularity::{coarea_check, detect_singularities, SingularityReport, MAX_SKIPPED_FRACTION, ROUNDING_GAP};
use crate::sphere::{cap_complement_area, SphericalCap, UnitVec3, Vec3};

/// Identifier of the producing build, embedded in every summary.
pub const BUILD_ID: &str = env!("HARMAP_BUILD_ID");

const EIGHT_PI: f64 = 8.0 * PI;
const INTEGER_GAP: f64 = 0.05;
const REGULAR_VALUE_MESH: usize = 48;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Construct,
    Energy,
    Degree,
    Minimize,
    Detect,
    VerifyLemma34,
    VerifyCoarea,
    VerifyCaps,
    SweepHomotopy,
}

fn empty_object() -> Value {
    Value::Object(Default::default())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: Command,
    #[serde(default = "empty_object")]
    pub params: Value,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read(path)?;
        Ok(serde_json::from_slice(&text)?)
    }

    /// Sets `params[key]`, replacing any value from the file.
    pub fn set_param(&mut self, key: &str, value: Value) -> Result<()> {
        match &mut self.params {
            Value::Object(map) => {
                map.insert(key.to_string(), value);
                Ok(())
            }
            _ => Err(Error::Parse("`params` must be a JSON object".into())),
        }
    }
}

/// One asserted quantity.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub relation: &'static str,
    pub bound: f64,
    pub pass: bool,
}

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Check {
            name: name.into(),
            value,
            relation: "<=",
            bound,
            pass: value <= bound,
        }
    }

    pub fn at_least(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Check {
            name: name.into(),
            value,
            relation: ">=",
            bound,
            pass: value >= bound,
        }
    }

    pub fn equals(name: impl Into<String>, value: i64, expected: i64) -> Self {
        Check {
            name: name.into(),
            value: value as f64,
            relation: "==",
            bound: expected as f64,
            pass: value == expected,
        }
    }

    pub fn holds(name: impl Into<String>, ok: bool) -> Self {
        Check::equals(name, ok as i64, 1)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub command: Command,
    pub build: &'static str,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub tolerances: BTreeMap<&'static str, f64>,
    pub results: Value,
    pub checks: Vec<Check>,
    pub passed: bool,
}

/// Everything a run produced; already written to the output directory.
#[derive(Clone, Debug)]
pub struct Report {
    pub summary: Summary,
    pub tables: Vec<(String, Table)>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.summary.passed
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.summary.checks.iter().find(|c| c.name == name)
    }

    /// 0 when every check passed, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.passed() {
            0
        } else {
            2
        }
    }
}

/// Exit code for a run that could not complete: 3 for bad configuration,
/// 1 for anything else.
pub fn error_exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidParameter { .. } | Error::Parse(_) | Error::Json(_) | Error::InvalidMap(_) | Error::Construction(_) => 3,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 3,
        _ => 1,
    }
}

struct Ctx<'a> {
    base_dir: &'a Path,
    out_dir: &'a Path,
    seed: u64,
    tolerances: BTreeMap<&'static str, f64>,
    checks: Vec<Check>,
    tables: Vec<(String, Table)>,
}

impl Ctx<'_> {
    fn tol(&mut self, name: &'static str, value: f64) {
        self.tolerances.insert(name, value);
    }

    fn check(&mut self, c: Check) {
        if !c.pass {
            log::warn!("check failed: {} = {} (want {} {})", c.name, c.value, c.relation, c.bound);
        }
        self.checks.push(c);
    }

    fn table(&mut self, name: &str, t: Table) {
        self.tables.push((name.to_string(), t));
    }
}

fn parse<T: serde::de::DeserializeOwned>(params: &Value) -> Result<T> {
    serde_json::from_value(params.clone()).map_err(|e| Error::Parse(format!("params: {e}")))
}

/// Runs `cfg`, resolving relative input paths against `base_dir`, and writes
/// the artifacts into `cfg.output_dir`.
pub fn run(cfg: &ExperimentConfig, base_dir: &Path) -> Result<Report> {
    let mut ctx = Ctx {
        base_dir,
        out_dir: &cfg.output_dir,
        seed: cfg.seed,
        tolerances: BTreeMap::new(),
        checks: Vec::new(),
        tables: Vec::new(),
    };
    if !cfg.params.is_object() {
        return Err(Error::Parse("`params` must be a JSON object".into()));
    }
    let results = match cfg.command {
        Command::Construct => construct(&mut ctx, parse(&cfg.params)?)?,
        Command::Energy => energy(&mut ctx, parse(&cfg.params)?)?,
        Command::Degree => degree(&mut ctx, parse(&cfg.params)?)?,
        Command::Minimize => minimize_cmd(&mut ctx, parse(&cfg.params)?)?,
        Command::Detect => detect(&mut ctx, parse(&cfg.params)?)?,
        Command::VerifyLemma34 => verify_lemma34(&mut ctx, parse(&cfg.params)?)?,
        Command::VerifyCoarea => verify_coarea(&mut ctx, parse(&cfg.params)?)?,
        Command::VerifyCaps => verify_caps(&mut ctx, parse(&cfg.params)?)?,
        Command::SweepHomotopy => sweep_homotopy(&mut ctx, parse(&cfg.params)?)?,
    };
    let passed = ctx.checks.iter().all(|c| c.pass);
    let summary = Summary {
        command: cfg.command,
        build: BUILD_ID,
        config: cfg.clone(),
        seed: cfg.seed,
        tolerances: ctx.tolerances,
        results,
        checks: ctx.checks,
        passed,
    };
    fs::create_dir_all(&cfg.output_dir)?;
    for (name, t) in &ctx.tables {
        t.write(&cfg.output_dir.join(name))?;
    }
    write_json(&cfg.output_dir.join("summary.json"), &summary)?;
    Ok(Report {
        summary,
        tables: ctx.tables,
    })
}

fn default_resolution() -> [usize; 2] {
    [90, 180]
}

fn global_grid(res: [usize; 2]) -> Result<SphereQuadGrid> {
    SphereQuadGrid::global(res[0], res[1])
}

/// Recipe for boundary data built by the pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanRecipe {
    #[serde(default)]
    pub label: Option<String>,
    pub base: Value,
    /// Center of the constant caps; searched for as an antipodal coincidence
    /// when absent.
    #[serde(default)]
    pub q: Option<UnitVec3>,
    #[serde(default)]
    pub delta: Option<f64>,
    /// `H¹` budget from which the cap radius is selected when `delta` is absent.
    #[serde(default)]
    pub eps: Option<f64>,
    /// Bubbles per cap; 0 stops after the constant caps.
    #[serde(rename = "N", default)]
    pub n: usize,
    #[serde(default)]
    pub j: Option<u32>,
    #[serde(default)]
    pub rule: SeparationRule,
    #[serde(default)]
    pub profile: BubbleProfile,
    #[serde(default)]
    pub expected_degree: Option<i64>,
}

struct Built {
    phi1: Phi1Spec,
    phi2: Option<Phi2Spec>,
    pipe: Pipeline,
    pair_mismatch: Option<f64>,
}

fn load_map_value(v: &Value, base_dir: &Path) -> Result<SphereMap> {
    match v {
        Value::String(p) => SphereMap::load(&base_dir.join(p)),
        other => SphereMap::from_json(other.clone(), base_dir),
    }
}

fn build_recipe(r: &PlanRecipe, base_dir: &Path, grid: &SphereQuadGrid) -> Result<Built> {
    let base = load_map_value(&r.base, base_dir)?;
    let (q, pair_mismatch) = match r.q {
        Some(q) => (q, None),
        None => {
            let pair = find_antipodal_pair(&base, grid)?;
            (pair.q, Some(pair.mismatch))
        }
    };
    let delta = match (r.delta, r.eps) {
        (Some(d), None) => d,
        (None, Some(eps)) => select_delta(&base, &q, eps, grid)?,
        _ => return Err(Error::Parse("a recipe needs exactly one of `delta` and `eps`".into())),
    };
    let phi1 = Phi1Spec::new(base.clone(), q, delta)?;
    if r.n == 0 {
        let m1 = build_phi1(&phi1)?;
        return Ok(Built {
            phi1,
            phi2: None,
            pipe: Pipeline {
                base,
                phi1: m1.clone(),
                phi2: m1,
            },
            pair_mismatch,
        });
    }
    let j = r.j.ok_or_else(|| Error::Parse("a recipe with N > 0 needs `j`".into()))?;
    let spec = Phi2Spec::new(phi1.clone(), r.n, j, r.rule, r.profile)?;
    let pipe = build_phi2(&spec)?;
    Ok(Built {
        phi1,
        phi2: Some(spec),
        pipe,
        pair_mismatch,
    })
}

/// Boundary data given as a map descriptor, a saved plan or a recipe.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundarySource {
    #[serde(default)]
    pub map: Option<Value>,
    #[serde(default)]
    pub plan: Option<Value>,
    #[serde(default)]
    pub recipe: Option<PlanRecipe>,
}

struct Boundary {
    map: SphereMap,
    /// Axis and constant-cap radius when the map came from the pipeline.
    caps: Option<(UnitVec3, f64)>,
}

fn load_plan(v: &Value, base_dir: &Path) -> Result<(ConstructionPlan, PathBuf)> {
    match v {
        Value::String(p) => {
            let path = base_dir.join(p);
            let plan = serde_json::from_slice(&fs::read(&path)?)?;
            Ok((plan, path.parent().unwrap_or(Path::new(".")).to_path_buf()))
        }
        other => Ok((serde_json::from_value(other.clone())?, base_dir.to_path_buf())),
    }
}

fn resolve_boundary(
    map: &Option<Value>,
    plan: &Option<Value>,
    recipe: &Option<PlanRecipe>,
    base_dir: &Path,
    grid: &SphereQuadGrid,
) -> Result<Boundary> {
    match (map, plan, recipe) {
        (Some(m), None, None) => Ok(Boundary {
            map: load_map_value(m, base_dir)?,
            caps: None,
        }),
        (None, Some(p), None) => {
            let (plan, dir) = load_plan(p, base_dir)?;
            let spec = plan.spec(&dir)?;
            Ok(Boundary {
                map: build_phi2(&spec)?.phi2,
                caps: Some((spec.phi1.q, spec.phi1.delta)),
            })
        }
        (None, None, Some(r)) => {
            let b = build_recipe(r, base_dir, grid)?;
            Ok(Boundary {
                map: b.pipe.phi2,
                caps: Some((b.phi1.q, b.phi1.delta)),
            })
        }
        _ => Err(Error::Parse("give exactly one of `map`, `plan` and `recipe`".into())),
    }
}

fn default_targets() -> Vec<UnitVec3> {
    [[0.3, -0.5, 0.81], [-0.62, 0.21, -0.4], [0.1, 0.93, -0.2]]
        .iter()
        .map(|v| UnitVec3::normalize(Vec3::new(v[0], v[1], v[2])))
        .collect()
}

/// Regular-value degrees at the given targets; targets that turn out not to
/// be regular are reported as `None`.
fn regular_degrees(m: &SphereMap, targets: &[UnitVec3]) -> Vec<(UnitVec3, Option<i64>)> {
    targets
        .iter()
        .map(|y| match degree_regular_value(m, y, REGULAR_VALUE_MESH) {
            Ok(d) => (*y, Some(d)),
            Err(e) => {
                log::warn!("target {:?} skipped: {e}", y.vec());
                (*y, None)
            }
        })
        .collect()
}

fn degree_json(raw: f64, regular: &[(UnitVec3, Option<i64>)]) -> Value {
    json!({
        "degree": raw.round() as i64,
        "raw": raw,
        "regular_values": regular.iter().map(|(y, d)| json!({"target": y, "degree": d})).collect::<Vec<_>>(),
    })
}

/// Integer-closeness and agreement of the regular-value counts with the integral.
fn degree_checks(ctx: &mut Ctx, prefix: &str, raw: f64, regular: &[(UnitVec3, Option<i64>)]) {
    let deg = raw.round() as i64;
    ctx.check(Check::at_most(format!("{prefix}integer_gap"), (raw - raw.round()).abs(), INTEGER_GAP));
    let counted: Vec<i64> = regular.iter().filter_map(|(_, d)| *d).collect();
    ctx.check(Check::at_least(format!("{prefix}regular_values_counted"), counted.len() as f64, 1.0));
    ctx.check(Check::holds(
        format!("{prefix}regular_value_agrees"),
        counted.iter().all(|&d| d == deg),
    ));
}

fn degree_tolerances(ctx: &mut Ctx) {
    ctx.tol("integer_gap", INTEGER_GAP);
    ctx.tol("regular_value_root_tol", 1e-12);
    ctx.tol("regular_value_mesh", REGULAR_VALUE_MESH as f64);
}

// ---------------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConstructParams {
    cases: Vec<PlanRecipe>,
    #[serde(default = "default_resolution")]
    resolution: [usize; 2],
    #[serde(default)]
    cap_resolution: CapResolution,
    /// Exponents for the `W^{1,p}` budget chain.
    #[serde(default)]
    p: Vec<f64>,
    #[serde(default = "default_support_slack")]
    support_slack: f64,
    #[serde(default = "default_chain_slack")]
    chain_slack: f64,
}

fn default_support_slack() -> f64 {
    1.02
}

fn default_chain_slack() -> f64 {
    1e-3
}

fn construct(ctx: &mut Ctx, p: ConstructParams) -> Result<Value> {
    if p.cases.is_empty() {
        return Err(Error::Parse("`cases` is empty".into()));
    }
    degree_tolerances(ctx);
    ctx.tol("pair_tol", PAIR_TOL);
    ctx.tol("support_slack", p.support_slack);
    ctx.tol("chain_slack", p.chain_slack);
    let coarse = global_grid(p.resolution)?;
    let mut out = Vec::new();
    let mut degrees = Table::new(&["case", "map", "raw", "degree"]);
    let mut chains = Table::new(&[
        "case", "p", "measured", "lp_term", "holder_term", "bubble_term", "bound", "bubble_measured",
    ]);
    for (k, case) in p.cases.iter().enumerate() {
        let label = case.label.clone().unwrap_or_else(|| format!("case{k}"));
        let pre = format!("{label}.");
        let built = build_recipe(case, ctx.base_dir, &coarse)?;
        let pipe = &built.pipe;
        let grid = adapted_grid(&[&pipe.base, &pipe.phi1, &pipe.phi2], p.resolution[0], p.resolution[1], &p.cap_resolution)?;
        let targets = default_targets();

        let mut maps = vec![("phi", &pipe.base), ("phi1", &pipe.phi1)];
        if built.phi2.is_some() {
            maps.push(("phi2", &pipe.phi2));
        }
        let mut deg_out = serde_json::Map::new();
        for (name, m) in &maps {
            let raw = degree_integral(m, &grid);
            let regular = regular_degrees(m, &targets);
            degree_checks(ctx, &format!("{pre}{name}."), raw, &regular);
            if let Some(d) = case.expected_degree {
                ctx.check(Check::equals(format!("{pre}{name}.degree"), raw.round() as i64, d));
            }
            degrees.push(vec![label.as_str().into(), (*name).into(), raw.into(), (raw.round() as i64).into()]);
            deg_out.insert(name.to_string(), degree_json(raw, &regular));
        }

        let max_grad = max_grad_sq(&pipe.base, &grid);
        let h1 = w1p_dist(&pipe.base, &pipe.phi1, 2.0, &grid)?;
        let h1_bound = phi1_h1_bound(max_grad, built.phi1.delta)?;
        ctx.check(Check::at_most(format!("{pre}phi1_h1_distance"), h1.full, h1_bound));
        let support_cap_area = 8.0 * PI * built.phi1.delta * built.phi1.delta;
        let support1 = diff_support_area(&pipe.base, &pipe.phi1, &grid, 1e-12)?;
        ctx.check(Check::at_most(format!("{pre}phi1_support_area"), support1, support_cap_area * p.support_slack));

        let mut case_out = json!({
            "label": label,
            "q": built.phi1.q,
            "pair_mismatch": built.pair_mismatch,
            "delta": built.phi1.delta,
            "max_grad_sq": max_grad,
            "degrees": deg_out,
            "phi1_h1_distance": h1.full,
            "phi1_h1_bound": h1_bound,
            "support_cap_area": support_cap_area,
            "phi1_support_area": support1,
        });

        if let Some(spec) = &built.phi2 {
            let plan = spec.plan();
            write_json(&ctx.out_dir.join(format!("plan_{label}.json")), &plan)?;
            let caps = spec.bubble_caps();
            let cap_degrees: Vec<f64> = caps.iter().map(|c| cap_degree_integral(&pipe.phi2, &grid, c)).collect();
            for (i, d) in cap_degrees.iter().enumerate() {
                ctx.check(Check::at_most(format!("{pre}cap{i}.integer_gap"), (d - d.round()).abs(), INTEGER_GAP));
                ctx.check(Check::equals(format!("{pre}cap{i}.abs_degree"), d.round().abs() as i64, 1));
            }
            for i in 0..spec.n {
                let (a, b) = (cap_degrees[i].round() as i64, cap_degrees[i + spec.n].round() as i64);
                ctx.check(Check::equals(format!("{pre}cap{i}.mirror_sum"), a + b, 0));
            }
            let support2 = diff_support_area(&pipe.base, &pipe.phi2, &grid, 1e-12)?;
            ctx.check(Check::at_most(format!("{pre}phi2_support_area"), support2, support_cap_area * p.support_slack));
            let mut chain_out = Vec::new();
            for &exp in &p.p {
                let c = budget_chain(spec, pipe, exp, &grid)?;
                ctx.check(Check::at_most(format!("{pre}budget_chain.p{exp}"), c.measured, c.bound() + p.chain_slack));
                chains.push(vec![
                    label.as_str().into(),
                    exp.into(),
                    c.measured.into(),
                    c.lp_term.into(),
                    c.holder_term.into(),
                    c.bubble_term.into(),
                    c.bound().into(),
                    c.bubble_measured.into(),
                ]);
                chain_out.push(json!({"chain": c, "bound": c.bound()}));
            }
            let obj = case_out.as_object_mut().expect("object");
            obj.insert("plan".into(), serde_json::to_value(&plan)?);
            obj.insert("cap_degrees".into(), json!(cap_degrees));
            obj.insert("phi2_support_area".into(), json!(support2));
            obj.insert("budget_chains".into(), Value::Array(chain_out));
        }
        out.push(case_out);
    }
    ctx.table("degrees.csv", degrees);
    if !chains.rows.is_empty() {
        ctx.table("budget_chain.csv", chains);
    }
    Ok(json!({ "cases": out }))
}

// ---------------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BubbleSweep {
    j: Vec<u32>,
    #[serde(default)]
    profile: BubbleProfile,
    #[serde(default = "default_bubble_center")]
    center: UnitVec3,
    /// Relative tolerance on the final energy against `8π`.
    #[serde(default = "default_energy_tol")]
    energy_tol: f64,
    /// Relative tolerance on energy against twice the image area.
    #[serde(default = "default_conformal_tol")]
    conformal_tol: f64,
}

fn default_bubble_center() -> UnitVec3 {
    UnitVec3::normalize(Vec3::new(0.36, 0.48, 0.8))
}

fn default_energy_tol() -> f64 {
    0.03
}

fn default_conformal_tol() -> f64 {
    0.005
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EnergyParams {
    #[serde(default)]
    map: Option<Value>,
    #[serde(default)]
    plan: Option<Value>,
    #[serde(default)]
    recipe: Option<PlanRecipe>,
    #[serde(default)]
    region: Option<SphericalCap>,
    #[serde(default)]
    bubble: Option<BubbleSweep>,
    #[serde(default = "default_resolution")]
    resolution: [usize; 2],
    #[serde(default)]
    cap_resolution: CapResolution,
}

fn energy(ctx: &mut Ctx, p: EnergyParams) -> Result<Value> {
    if let Some(sweep) = &p.bubble {
        if p.map.is_some() || p.plan.is_some() || p.recipe.is_some() || p.region.is_some() {
            return Err(Error::Parse("`bubble` excludes `map`, `plan`, `recipe` and `region`".into()));
        }
        return bubble_energies(ctx, sweep, p.resolution, &p.cap_resolution);
    }
    let coarse = global_grid(p.resolution)?;
    let b = resolve_boundary(&p.map, &p.plan, &p.recipe, ctx.base_dir, &coarse)?;
    let grid = adapted_grid(&[&b.map], p.resolution[0], p.resolution[1], &p.cap_resolution)?;
    let e = boundary_energy(&b.map, &grid, p.region.as_ref());
    let a = image_area(&b.map, &grid, p.region.as_ref());
    Ok(json!({
        "region": p.region,
        "boundary_energy": e,
        "image_area": a,
        "energy_over_twice_area": e / (2.0 * a),
        "max_grad_sq": max_grad_sq(&b.map, &grid),
    }))
}

fn bubble_energies(ctx: &mut Ctx, s: &BubbleSweep, res: [usize; 2], cap_res: &CapResolution) -> Result<Value> {
    if s.j.is_empty() {
        return Err(Error::Parse("`bubble.j` is empty".into()));
    }
    ctx.tol("energy_tol", s.energy_tol);
    ctx.tol("conformal_tol", s.conformal_tol);
    let target = UnitVec3::SOUTH;
    let constant = SphereMap::constant(target);
    let mut table = Table::new(&["j", "energy", "image_area", "energy_minus_8pi", "energy_over_twice_area"]);
    let mut rows = Vec::new();
    let mut energies = Vec::new();
    for &j in &s.j {
        let spec = BubbleSpec {
            center: s.center,
            j,
            target_value: target,
            orientation: Orientation::Preserving,
            antipodal: false,
            profile: s.profile,
        };
        let m = build_bubble(&constant, &spec)?;
        let grid = adapted_grid(&[&m], res[0], res[1], cap_res)?;
        let core = SphericalCap::new(s.center, 1.0 / j as f64)?;
        let e = boundary_energy(&m, &grid, Some(&core));
        let a = image_area(&m, &grid, Some(&core));
        let ratio = e / (2.0 * a);
        ctx.check(Check::at_most(format!("j{j}.conformality"), (ratio - 1.0).abs(), s.conformal_tol));
        table.push(vec![j.into(), e.into(), a.into(), (e - EIGHT_PI).into(), ratio.into()]);
        rows.push(json!({"j": j, "energy": e, "image_area": a, "energy_over_twice_area": ratio}));
        energies.push(e);
    }
    if energies.len() > 1 {
        let worst = energies.windows(2).map(|w| w[0] - w[1]).fold(f64::MIN, f64::max);
        ctx.check(Check {
            name: "energy_strictly_increasing".into(),
            value: worst,
            relation: "<",
            bound: 0.0,
            pass: worst < 0.0,
        });
    }
    let last = *energies.last().expect("nonempty");
    ctx.check(Check::at_most("final_energy_rel_error", (last - EIGHT_PI).abs() / EIGHT_PI, s.energy_tol));
    ctx.table("bubble_energy.csv", table);
    Ok(json!({"eight_pi": EIGHT_PI, "profile": s.profile, "center": s.center, "rows": rows}))
}

// ---------------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DegreeParams {
    #[serde(default)]
    map: Option<Value>,
    #[serde(default)]
    plan: Option<Value>,
    #[serde(default)]
    recipe: Option<PlanRecipe>,
    #[serde(default)]
    targets: Option<Vec<UnitVec3>>,
    #[serde(default)]
    expected: Option<i64>,
    #[serde(default = "default_resolution")]
    resolution: [usize; 2],
    #[serde(default)]
    cap_resolution: CapResolution,
}

fn degree(ctx: &mut Ctx, p: DegreeParams) -> Result<Value> {
    degree_tolerances(ctx);
    let coarse = global_grid(p.resolution)?;
    let b = resolve_boundary(&p.map, &p.plan, &p.recipe, ctx.base_dir, &coarse)?;
    let grid = adapted_grid(&[&b.map], p.resolution[0], p.resolution[1], &p.cap_resolution)?;
    let raw = degree_integral(&b.map, &grid);
    let regular = regular_degrees(&b.map, &p.targets.unwrap_or_else(default_targets));
    degree_checks(ctx, "", raw, &regular);
    if let Some(d) = p.expected {
        ctx.check(Check::equals("degree", raw.round() as i64, d));
    }
    Ok(degree_json(raw, &regular))
}

// ---------------------------------------------------------------------------

/// Expected features of singularity reports.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct Expectations {
    /// Energy range in units of `8π`.
    #[serde(default)]
    energy_over_8pi: Option<[f64; 2]>,
    #[serde(default)]
    cells: Option<usize>,
    #[serde(default)]
    min_cells: Option<usize>,
    /// Sorted list of cell degrees.
    #[serde(default)]
    degrees: Option<Vec<i64>>,
    /// Largest distance of any cell from the origin, in lattice spacings.
    #[serde(default)]
    max_origin_distance_h: Option<f64>,
    /// Require cells of both signs within the constant-cap cone around the
    /// pipeline axis.
    #[serde(default)]
    near_axis_both_signs: bool,
    /// Lower bound on `lhs / rhs` of the co-area check, applied to every attempt.
    #[serde(default)]
    coarea_ratio: Option<f64>,
}

fn radius(c: &[f64; 3]) -> f64 {
    Vec3::new(c[0], c[1], c[2]).norm()
}

fn axis_distance(c: &[f64; 3], axis: &UnitVec3) -> f64 {
    let x = Vec3::new(c[0], c[1], c[2]);
    (x - axis.vec() * x.dot(&axis.vec())).norm()
}

fn report_checks(ctx: &mut Ctx, pre: &str, r: &SingularityReport, e: &Expectations, axis: Option<(UnitVec3, f64)>) -> Result<()> {
    let degs = r.degrees();
    ctx.check(Check::equals(
        format!("{pre}max_abs_cell_degree_is_one"),
        degs.iter().all(|d| d.abs() == 1) as i64,
        1,
    ));
    if r.unresolved.is_empty() {
        ctx.check(Check::holds(format!("{pre}degree_conserved"), r.conserved != Some(false)));
    }
    if let Some(n) = e.cells {
        ctx.check(Check::equals(format!("{pre}cells"), r.cells.len() as i64, n as i64));
    }
    if let Some(n) = e.min_cells {
        ctx.check(Check::at_least(format!("{pre}cells"), r.cells.len() as f64, n as f64));
    }
    if let Some(want) = &e.degrees {
        let mut got = degs.clone();
        got.sort_unstable();
        let mut want = want.clone();
        want.sort_unstable();
        ctx.check(Check::holds(format!("{pre}degrees_match"), got == want));
    }
    if let Some(k) = e.max_origin_distance_h {
        let far = r.cells.iter().map(|c| radius(&c.center)).fold(0.0, f64::max);
        ctx.check(Check::at_most(format!("{pre}max_origin_distance"), far, k * r.h));
    }
    if e.near_axis_both_signs {
        let (q, delta) = axis.ok_or_else(|| Error::Parse("`near_axis_both_signs` needs a plan or recipe boundary".into()))?;
        let reach = delta + 2.0 * r.h;
        let near: Vec<i64> = r
            .cells
            .iter()
            .filter(|c| axis_distance(&c.center, &q) <= reach)
            .map(|c| c.degree)
            .collect();
        ctx.check(Check::holds(
            format!("{pre}near_axis_both_signs"),
            near.contains(&1) && near.contains(&-1),
        ));
        if let Some(n) = e.min_cells {
            ctx.check(Check::at_least(format!("{pre}near_axis_cells"), near.len() as f64, n as f64));
        }
    }
    Ok(())
}

fn cell_table(r: &SingularityReport) -> Table {
    let mut t = Table::new(&["x", "y", "z", "degree", "local_energy", "touches_boundary"]);
    for c in &r.cells {
        t.push(vec![
            c.center[0].into(),
            c.center[1].into(),
            c.center[2].into(),
            c.degree.into(),
            c.local_energy.into(),
            c.touches_boundary.into(),
        ]);
    }
    t
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MinimizeParams {
    #[serde(default)]
    map: Option<Value>,
    #[serde(default)]
    plan: Option<Value>,
    #[serde(default)]
    recipe: Option<PlanRecipe>,
    h: f64,
    #[serde(default = "default_max_sweeps")]
    max_sweeps: usize,
    #[serde(default = "default_rel_tol")]
    rel_tol: f64,
    #[serde(default = "default_restarts")]
    restarts: usize,
    /// Target grid for the co-area check, skipped when absent.
    #[serde(default)]
    coarea_resolution: Option<[usize; 2]>,
    #[serde(default)]
    export_field: bool,
    #[serde(default)]
    expect: Expectations,
    #[serde(default = "default_resolution")]
    resolution: [usize; 2],
    #[serde(default)]
    cap_resolution: CapResolution,
}

fn default_max_sweeps() -> usize {
    SolverConfig::default().max_sweeps
}

fn default_rel_tol() -> f64 {
    SolverConfig::default().rel_tol
}

fn default_restarts() -> usize {
    1
}

fn minimize_cmd(ctx: &mut Ctx, p: MinimizeParams) -> Result<Value> {
    let solver = SolverConfig {
        max_sweeps: p.max_sweeps,
        rel_tol: p.rel_tol,
        restarts: p.restarts,
        seed: ctx.seed,
    };
    solver.validate()?;
    ctx.tol("rel_tol", p.rel_tol);
    ctx.tol("rounding_gap", ROUNDING_GAP);
    ctx.tol("max_skipped_fraction", MAX_SKIPPED_FRACTION);
    let coarse = global_grid(p.resolution)?;
    let b = resolve_boundary(&p.map, &p.plan, &p.recipe, ctx.base_dir, &coarse)?;
    let grid = adapted_grid(&[&b.map], p.resolution[0], p.resolution[1], &p.cap_resolution)?;
    let boundary_raw = degree_integral(&b.map, &grid);
    let boundary_degree = boundary_raw.round() as i64;
    let run = minimize(&b.map, p.h, &solver)?;
    let targets = p.coarea_resolution.map(global_grid).transpose()?;

    let mut attempts = Vec::new();
    let mut table = Table::new(&[
        "attempt", "initial", "energy", "sweeps", "converged", "cells", "positive", "negative", "unresolved",
    ]);
    for (k, a) in run.attempts.iter().enumerate() {
        let pre = format!("attempt{k}.");
        let report = detect_singularities(&a.field, Some(boundary_degree));
        let trace_ok = a.report.energy_trace.windows(2).all(|w| w[1] <= w[0]);
        ctx.check(Check::holds(format!("{pre}energy_nonincreasing"), trace_ok));
        let mut coarea = Value::Null;
        if let Some(g) = &targets {
            match coarea_check(&a.field, g) {
                Ok(c) => {
                    if let Some(ratio) = p.expect.coarea_ratio {
                        ctx.check(Check::at_least(format!("{pre}coarea_lhs_over_rhs"), c.lhs / c.rhs, ratio));
                    }
                    coarea = json!({"lhs": c.lhs, "rhs": c.rhs, "ratio": c.lhs / c.rhs});
                }
                Err(e) => {
                    if p.expect.coarea_ratio.is_some() {
                        ctx.check(Check::holds(format!("{pre}coarea_sample_valid"), false));
                    }
                    coarea = json!({"error": e.to_string()});
                }
            }
        }
        let count = |s: i64| report.cells.iter().filter(|c| c.degree.signum() == s).count();
        table.push(vec![
            k.into(),
            serde_json::to_string(&a.initial)?.as_str().into(),
            a.report.energy.into(),
            a.report.sweeps.into(),
            a.report.converged.into(),
            report.cells.len().into(),
            count(1).into(),
            count(-1).into(),
            report.unresolved.len().into(),
        ]);
        attempts.push(json!({
            "initial": a.initial,
            "energy": a.report.energy,
            "sweeps": a.report.sweeps,
            "converged": a.report.converged,
            "degenerate_updates": a.report.degenerate_updates,
            "singularities": report,
            "coarea": coarea,
        }));
    }
    let best = run.best();
    let report = detect_singularities(&best.field, Some(boundary_degree));
    if let Some([lo, hi]) = p.expect.energy_over_8pi {
        let ratio = best.report.energy / EIGHT_PI;
        ctx.check(Check::at_least("best.energy_over_8pi_min", ratio, lo));
        ctx.check(Check::at_most("best.energy_over_8pi_max", ratio, hi));
    }
    report_checks(ctx, "best.", &report, &p.expect, b.caps)?;

    let mut trace = Table::new(&["sweep", "energy"]);
    for (i, e) in best.report.energy_trace.iter().enumerate() {
        trace.push(vec![i.into(), (*e).into()]);
    }
    ctx.table("attempts.csv", table);
    ctx.table("singular_cells.csv", cell_table(&report));
    ctx.table("energy_trace.csv", trace);
    if p.export_field {
        let meta = FieldMeta {
            h: p.h,
            sweeps: best.report.sweeps,
            energy: best.report.energy,
        };
        best.field.export_vtk(&ctx.out_dir.join("field.vtk"), &meta)?;
    }
    Ok(json!({
        "boundary_degree": boundary_degree,
        "boundary_degree_raw": boundary_raw,
        "h": p.h,
        "nodes": best.field.lattice().len(),
        "interior_nodes": best.field.lattice().interior_count(),
        "selection": "lowest energy over the starts; a heuristic, not a certified global minimum",
        "best": run.best,
        "attempts": attempts,
    }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectParams {
    field: PathBuf,
    #[serde(default)]
    boundary_degree: Option<i64>,
    #[serde(default)]
    expect: Expectations,
}

fn detect(ctx: &mut Ctx, p: DetectParams) -> Result<Value> {
    ctx.tol("rounding_gap", ROUNDING_GAP);
    let (field, meta) = BallField::import_vtk(&ctx.base_dir.join(&p.field))?;
    let report = detect_singularities(&field, p.boundary_degree);
    report_checks(ctx, "", &report, &p.expect, None)?;
    ctx.table("singular_cells.csv", cell_table(&report));
    Ok(json!({"field": meta, "singularities": report}))
}

// ---------------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SeminormDecay {
    p: Vec<f64>,
    final_ratio: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Sharpness {
    p: f64,
    /// Floor on `seminorm^p` in units of `8π`.
    floor_over_8pi: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Lemma34Params {
    p: Vec<f64>,
    j: Vec<u32>,
    #[serde(default)]
    decay: Option<SeminormDecay>,
    #[serde(default)]
    sharpness: Option<Sharpness>,
    /// Relative slack on measured `seminorm^p` against the term-by-term budget.
    #[serde(default)]
    budget_slack: Option<f64>,
    #[serde(default = "default_i1_slack")]
    i1_slack: f64,
    #[serde(default = "default_lemma_resolution")]
    resolution: [usize; 2],
    #[serde(default)]
    cap_resolution: CapResolution,
}

fn default_i1_slack() -> f64 {
    1e-6
}

fn default_lemma_resolution() -> [usize; 2] {
    [30, 60]
}

fn monotone_decreasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[1] < w[0])
}

fn verify_lemma34(ctx: &mut Ctx, p: Lemma34Params) -> Result<Value> {
    if p.p.is_empty() || p.j.is_empty() {
        return Err(Error::Parse("`p` and `j` must be nonempty".into()));
    }
    ctx.tol("i1_slack", p.i1_slack);
    if let Some(s) = p.budget_slack {
        ctx.tol("budget_slack", s);
    }
    let target = UnitVec3::SOUTH;
    let center = default_bubble_center();
    let constant = SphereMap::constant(target);
    let mut table = Table::new(&[
        "p", "j", "I1_a", "I1_b", "I1_quad", "I2_quad", "budget", "seminorm", "seminorm_p",
    ]);
    let mut rows = Vec::new();
    let (mut excess_a, mut excess_b) = (f64::MIN, f64::MIN);
    let mut seminorms: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for &exp in &p.p {
        let mut i2s = Vec::new();
        for &j in &p.j {
            let spec = BubbleSpec {
                center,
                j,
                target_value: target,
                orientation: Orientation::Preserving,
                antipodal: false,
                profile: BubbleProfile::Exact,
            };
            let bubble = build_bubble(&constant, &spec)?;
            let grid = adapted_grid(&[&bubble], p.resolution[0], p.resolution[1], &p.cap_resolution)?;
            let semi = w1p_dist(&constant, &bubble, exp, &grid)?.seminorm;
            seminorms.entry(format!("{exp}")).or_default().push(semi);
            let blank = || Cell::Text(String::new());
            let mut row = vec![exp.into(), j.into()];
            let mut row_json = json!({"p": exp, "j": j, "seminorm": semi, "seminorm_p": semi.powf(exp)});
            if exp < 2.0 {
                let a = i1_bound(exp, j, AnnulusBoundForm::Squared)?;
                let b = i1_bound(exp, j, AnnulusBoundForm::Substituted)?;
                let quad = i1_quadrature(exp, j)?;
                let i2 = i2_quadrature(exp, j)?;
                let budget = bubble_budget(exp, j)?;
                excess_a = excess_a.max(quad - a);
                excess_b = excess_b.max(quad - b);
                i2s.push(i2);
                if let Some(s) = p.budget_slack {
                    ctx.check(Check::at_most(
                        format!("p{exp}.j{j}.seminorm_p_over_budget"),
                        semi.powf(exp) / budget.total(),
                        1.0 + s,
                    ));
                }
                row.extend([a.into(), b.into(), quad.into(), i2.into(), budget.total().into()]);
                let obj = row_json.as_object_mut().expect("object");
                obj.insert("I1_a".into(), json!(a));
                obj.insert("I1_b".into(), json!(b));
                obj.insert("I1_quad".into(), json!(quad));
                obj.insert("I2_quad".into(), json!(i2));
                obj.insert("budget".into(), json!(budget));
            } else {
                row.extend([blank(), blank(), blank(), blank(), blank()]);
            }
            row.extend([semi.into(), semi.powf(exp).into()]);
            table.push(row);
            rows.push(row_json);
        }
        if i2s.len() > 1 {
            ctx.check(Check::holds(format!("p{exp}.I2_decreasing_in_j"), monotone_decreasing(&i2s)));
        }
    }

    let mut i1 = Value::Null;
    if excess_a > f64::MIN {
        let verdict = match (excess_a <= p.i1_slack, excess_b <= p.i1_slack) {
            (true, true) => "both",
            (true, false) => "a",
            (false, true) => "b",
            (false, false) => "neither",
        };
        // Passes when both closed forms bound the quadrature, or when one of
        // them does everywhere and is thereby identified.
        let value = excess_a.min(excess_b);
        ctx.check(Check::at_most("I1_quadrature_bounded", value, p.i1_slack));
        i1 = json!({
            "max_excess_over_a": excess_a,
            "max_excess_over_b": excess_b,
            "bounding_variant": verdict,
        });
    }

    if let Some(d) = &p.decay {
        ctx.tol("decay_final_ratio", d.final_ratio);
        for exp in &d.p {
            let s = seminorms
                .get(&format!("{exp}"))
                .ok_or_else(|| Error::Parse(format!("decay exponent {exp} is not in `p`")))?;
            ctx.check(Check::holds(format!("p{exp}.seminorm_decreasing"), monotone_decreasing(s)));
            ctx.check(Check::at_most(
                format!("p{exp}.seminorm_final_over_initial"),
                s[s.len() - 1] / s[0],
                d.final_ratio,
            ));
        }
    }
    if let Some(sh) = &p.sharpness {
        ctx.tol("sharpness_floor_over_8pi", sh.floor_over_8pi);
        let s = seminorms
            .get(&format!("{}", sh.p))
            .ok_or_else(|| Error::Parse(format!("sharpness exponent {} is not in `p`", sh.p)))?;
        let low = s.iter().map(|x| x.powf(sh.p) / EIGHT_PI).fold(f64::MAX, f64::min);
        ctx.check(Check::at_least(format!("p{}.min_seminorm_p_over_8pi", sh.p), low, sh.floor_over_8pi));
    }
    ctx.table("lemma34.csv", table);
    Ok(json!({"rows": rows, "i1_variants": i1}))
}

// ---------------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CoareaParams {
    h: f64,
    #[serde(default = "default_coarea_resolution")]
    resolution: [usize; 2],
    /// Exported field to check; the radial field `x/|x|` when absent.
    #[serde(default)]
    field: Option<PathBuf>,
    #[serde(default = "default_coarea_tol")]
    tol: f64,
}

fn default_coarea_resolution() -> [usize; 2] {
    [16, 32]
}

fn default_coarea_tol() -> f64 {
    0.05
}

/// The field `x/|x|`, with an arbitrary value at the origin.
pub fn radial_field(h: f64) -> Result<BallField> {
    let lat = Arc::new(BallLattice::new(h)?);
    Ok(BallField::from_fn(lat, |x| {
        if x.norm() > 0.0 {
            x.normalize()
        } else {
            Vec3::z()
        }
    }))
}

fn verify_coarea(ctx: &mut Ctx, p: CoareaParams) -> Result<Value> {
    ctx.tol("coarea_tol", p.tol);
    ctx.tol("max_skipped_fraction", MAX_SKIPPED_FRACTION);
    let grid = global_grid(p.resolution)?;
    let (field, source) = match &p.field {
        Some(path) => (BallField::import_vtk(&ctx.base_dir.join(path))?.0, "field"),
        None => (radial_field(p.h)?, "radial"),
    };
    if p.field.is_some() && (field.lattice().h() - p.h).abs() > 1e-12 {
        return Err(Error::Parse(format!("field spacing {} differs from h = {}", field.lattice().h(), p.h)));
    }
    let c = coarea_check(&field, &grid)?;
    if p.field.is_none() {
        ctx.check(Check::at_most("lhs_vs_8pi", (c.lhs - EIGHT_PI).abs() / EIGHT_PI, p.tol));
        ctx.check(Check::at_most("rhs_vs_8pi", (c.rhs - EIGHT_PI).abs() / EIGHT_PI, p.tol));
        ctx.check(Check::at_most("lhs_vs_rhs", (c.lhs - c.rhs).abs() / c.rhs, p.tol));
    } else {
        ctx.check(Check::at_least("lhs_over_rhs", c.lhs / c.rhs, 1.0 - p.tol));
    }
    Ok(json!({"source": source, "h": p.h, "lhs": c.lhs, "rhs": c.rhs, "ratio": c.lhs / c.rhs}))
}

// ---------------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CapsParams {
    eps: Vec<f64>,
    #[serde(default = "default_resolution")]
    resolution: [usize; 2],
    #[serde(default = "default_caps_tol")]
    tol: f64,
}

fn default_caps_tol() -> f64 {
    1e-4
}

fn verify_caps(ctx: &mut Ctx, p: CapsParams) -> Result<Value> {
    ctx.tol("area_tol", p.tol);
    let mut table = Table::new(&["eps", "stated", "chordal", "quadrature", "matches"]);
    let mut rows = Vec::new();
    for &eps in &p.eps {
        let forms = cap_complement_area(eps)?;
        let cap = SphericalCap::new(UnitVec3::normalize(Vec3::new(0.2, -0.4, 0.9)), eps)?;
        let spec = CapGridSpec {
            cap,
            segments: vec![RadialSegment::uniform(0.0, cap.angular_radius(), 4)],
            n_theta: 16,
        };
        let grid = SphereQuadGrid::composite(p.resolution[0], p.resolution[1], &[spec])?;
        let quad = grid.integrate(|n| if cap.contains(&n.pos) { 0.0 } else { 1.0 });
        let near = |x: f64| (x - quad).abs() <= p.tol;
        let matches = match (near(forms.stated_value), near(forms.chordal_value)) {
            (true, true) => "both",
            (true, false) => "stated",
            (false, true) => "chordal",
            (false, false) => "neither",
        };
        ctx.check(Check::at_most(format!("eps{eps}.chordal_vs_quadrature"), (forms.chordal_value - quad).abs(), p.tol));
        table.push(vec![eps.into(), forms.stated_value.into(), forms.chordal_value.into(), quad.into(), matches.into()]);
        rows.push(json!({"eps": eps, "forms": forms, "quadrature": quad, "matches": matches}));
    }
    ctx.table("cap_complement.csv", table);
    Ok(json!({"rows": rows}))
}

// ---------------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct HomotopyParams {
    recipe: PlanRecipe,
    shifts: Vec<f64>,
    h: f64,
    #[serde(default = "default_max_sweeps")]
    max_sweeps: usize,
    #[serde(default = "default_rel_tol")]
    rel_tol: f64,
    #[serde(default = "default_restarts")]
    restarts: usize,
    #[serde(default = "default_resolution")]
    resolution: [usize; 2],
}

fn sweep_homotopy(ctx: &mut Ctx, p: HomotopyParams) -> Result<Value> {
    if p.recipe.n == 0 {
        return Err(Error::Parse("the homotopy moves bubbles; the recipe needs N > 0".into()));
    }
    let coarse = global_grid(p.resolution)?;
    let built = build_recipe(&p.recipe, ctx.base_dir, &coarse)?;
    let spec = built.phi2.expect("N > 0");
    let solver = SolverConfig {
        max_sweeps: p.max_sweeps,
        rel_tol: p.rel_tol,
        restarts: p.restarts,
        seed: ctx.seed,
    };
    solver.validate()?;
    ctx.tol("rel_tol", p.rel_tol);
    ctx.tol("rounding_gap", ROUNDING_GAP);
    let mut table = Table::new(&["shift", "attempt", "energy", "converged", "cells", "best"]);
    let mut rows = Vec::new();
    for &t in &p.shifts {
        let m = spec.bubbles(&built.pipe.phi1).iter().try_fold(built.pipe.phi1.clone(), |m, b| {
            let mut patch = b.patch();
            patch.shift = t;
            m.with_patch(Patch::Bubble(patch))
        })?;
        let run = minimize(&m, p.h, &solver)?;
        let mut attempts = Vec::new();
        for (k, a) in run.attempts.iter().enumerate() {
            let r = detect_singularities(&a.field, Some(0));
            ctx.check(Check::holds(
                format!("shift{t}.attempt{k}.energy_nonincreasing"),
                a.report.energy_trace.windows(2).all(|w| w[1] <= w[0]),
            ));
            table.push(vec![
                t.into(),
                k.into(),
                a.report.energy.into(),
                a.report.converged.into(),
                r.cells.len().into(),
                (k == run.best).into(),
            ]);
            attempts.push(json!({"energy": a.report.energy, "converged": a.report.converged, "degrees": r.degrees()}));
        }
        rows.push(json!({"shift": t, "best": run.best, "attempts": attempts}));
    }
    ctx.table("homotopy.csv", table);
    Ok(json!({"plan": spec.plan(), "rows": rows, "note": "exploratory; no asserted values"}))
}
