use std::path::Path;

use anyhow::{anyhow, bail, Context};
use gmlab_core::io::{matrix_to_rows, read_matrix, read_matrix_with_shape};
use gmlab_core::koopmann::{solve_h_space, svec_len, QuadraticEstimator};
use gmlab_core::lab::{
    ex2_h, example_ex1, example_ex2_with, search_counterexample, Counterexample, SearchOptions,
    SearchOutcome, NOT_FOUND_THRESHOLD,
};
use gmlab_core::moments::SkewedTwoPoint;
use gmlab_core::refuter::{
    check_fstar_unbiasedness, hansen_tilde, refute_f2_unbiasedness_with_tol, BlackBox,
    RefutationOutcome,
};
use gmlab_core::regress::{CovarianceSpec, DesignMatrix, LinearEstimator};
use gmlab_core::sim::simulate_variances;
use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

use crate::{
    AnalyzeArgs, Builtin, CounterexampleArgs, Outcome, RefuteArgs, SimulateArgs, EXIT_NOT_FOUND,
    EXIT_REFUTED,
};

/// Largest `n` for which the independent-coordinates check enumerates its
/// product laws.
const FSTAR_MAX_N: usize = 12;

fn load_design(path: &Path) -> anyhow::Result<DesignMatrix> {
    let m = read_matrix(path).with_context(|| format!("reading design {}", path.display()))?;
    Ok(DesignMatrix::new(m)?)
}

fn row(key: &str, value: impl ToString) -> (String, String) {
    (key.to_string(), value.to_string())
}

fn ex1_h(n: usize) -> DMatrix<f64> {
    let mut diag = DVector::zeros(n);
    diag[0] = 1.0;
    diag[1] = -1.0;
    DMatrix::from_diagonal(&diag)
}

/// True when `X` is a nonzero multiple of the ones vector, the only design
/// for which i.i.d. errors force `Cov(c'β̂_OLS, y'Hy) = 0` for every
/// admissible `H` and `c`.
fn is_location(design: &DesignMatrix) -> bool {
    let x = design.matrix();
    design.k() == 1 && x.iter().all(|v| *v == x[0])
}

pub fn analyze(args: &AnalyzeArgs) -> anyhow::Result<Outcome> {
    let (design, reference) = match (&args.design, args.builtin) {
        (Some(path), _) => (load_design(path)?, None),
        (None, Some(Builtin::Ex1)) => {
            if args.n < 2 {
                bail!("ex1 needs --n >= 2");
            }
            (DesignMatrix::location(args.n)?, Some(ex1_h(args.n)))
        }
        (None, Some(Builtin::Ex2)) => (DesignMatrix::one_way(2, 2)?, Some(ex2_h())),
        (None, Some(other)) => bail!("--builtin {} is not a design; use ex1 or ex2", name(other)),
        (None, None) => bail!("one of --design or --builtin is required"),
    };
    let basis = solve_h_space(&design)?;
    let location = is_location(&design);
    let mut rows = vec![
        row("n", design.n()),
        row("k", design.k()),
        row("symmetric dimension", svec_len(design.n())),
        row("constraint rank", basis.constraint_rank),
        row("H-space dimension", basis.dim),
        row("location i.i.d. null", location),
    ];
    let reference = reference.map(|h| {
        let residual = basis.span_residual(&h);
        rows.push(row("reference H residual", residual));
        json!({ "span_residual": residual, "in_span": residual < 1e-10 })
    });
    let result = json!({
        "n": design.n(),
        "k": design.k(),
        "symmetric_dim": svec_len(design.n()),
        "constraint_rank": basis.constraint_rank,
        "dim": basis.dim,
        "location_iid_null": location,
        "reference_h": reference,
        "basis": args.basis.then(|| basis.basis.iter().map(matrix_to_rows).collect::<Vec<_>>()),
    });
    Ok(Outcome {
        result,
        table: rows,
        exit: 0,
    })
}

fn name(b: Builtin) -> &'static str {
    match b {
        Builtin::Ex1 => "ex1",
        Builtin::Ex2 => "ex2",
        Builtin::Ols => "ols",
        Builtin::Gls => "gls",
        Builtin::HansenTilde => "hansen-tilde",
    }
}

fn report_rows(cx: &Counterexample, rows: &mut Vec<(String, String)>) {
    let r = &cx.report;
    rows.push(row("c", format!("{:?}", r.c.as_slice())));
    rows.push(row("cov_term", r.cov_term));
    rows.push(row("quad_var", r.quad_var));
    rows.push(row("alpha*", r.alpha_star));
    rows.push(row("Var(c'OLS)", r.var_ols));
    rows.push(row("Var(c'alpha*)", r.var_alpha_star));
    rows.push(row("improvement", r.improvement));
    if let Some(check) = &r.enumeration_check {
        rows.push(row("enumeration consistent", check.consistent));
    }
    if let Some(mc) = &r.mc_confirmation {
        let fmt =
            |s: &gmlab_core::sim::MonteCarloSummary| format!("{} ± {}", s.estimate, s.std_error);
        rows.push(row("MC Var(c'OLS)", fmt(&mc.var_ols)));
        rows.push(row("MC Var(c'alpha*)", fmt(&mc.var_alpha)));
        rows.push(row("MC improvement", fmt(&mc.improvement)));
    }
    if let Some(note) = &r.note {
        rows.push(row("note", note));
    }
}

fn confirm(cx: &mut Counterexample, reps: Option<u64>, seed: u64) -> anyhow::Result<()> {
    if let Some(reps) = reps {
        let sim = simulate_variances(&cx.estimator, cx.c(), &cx.law, reps, seed)?;
        cx.report.mc_confirmation = Some(sim);
    }
    Ok(())
}

pub fn counterexample(args: &CounterexampleArgs, seed: u64) -> anyhow::Result<Outcome> {
    let builtin = match (&args.design, args.builtin) {
        (Some(_), _) => None,
        (None, Some(b @ (Builtin::Ex1 | Builtin::Ex2))) => Some(b),
        (None, Some(other)) => {
            bail!(
                "--builtin {} is not a counterexample; use ex1 or ex2",
                name(other)
            )
        }
        (None, None) => bail!("one of --design or --builtin is required"),
    };
    let mut rows = Vec::new();
    let (result, found) = match builtin {
        Some(b) => {
            let mut cx = match b {
                Builtin::Ex1 => example_ex1(args.n, if args.symmetric { 0.0 } else { args.gamma })?,
                _ => {
                    let base = if args.symmetric {
                        SkewedTwoPoint::symmetric(1.0)?
                    } else {
                        SkewedTwoPoint::new(1.0, args.skew_p)?
                    };
                    example_ex2_with(&base)?
                }
            };
            let found =
                cx.report.improvement > 0.0 && cx.report.cov_term.abs() > NOT_FOUND_THRESHOLD;
            if found {
                confirm(&mut cx, args.reps, seed)?;
            }
            rows.push(row("source", format!("builtin {}", name(b))));
            rows.push(row("outcome", if found { "found" } else { "not_found" }));
            report_rows(&cx, &mut rows);
            let result = json!({
                "outcome": if found { "found" } else { "not_found" },
                "source": format!("builtin:{}", name(b)),
                "counterexample": cx,
            });
            (result, found)
        }
        None => {
            let design = load_design(args.design.as_deref().expect("design checked above"))?;
            let opts = SearchOptions {
                budget: args.budget,
                seed,
                skew_p: args.skew_p,
                symmetric: args.symmetric,
            };
            let mut outcome = search_counterexample(&design, args.strategy, &opts)?;
            rows.push(row("source", format!("search ({})", args.strategy)));
            let found = match &mut outcome {
                SearchOutcome::Found {
                    candidate,
                    candidates_evaluated,
                    counterexample,
                } => {
                    confirm(counterexample, args.reps, seed)?;
                    rows.push(row("outcome", "found"));
                    rows.push(row("candidate", candidate));
                    rows.push(row("candidates evaluated", candidates_evaluated));
                    report_rows(counterexample, &mut rows);
                    true
                }
                SearchOutcome::NotFound {
                    candidates_evaluated,
                    max_abs_cov,
                } => {
                    rows.push(row("outcome", "not_found"));
                    rows.push(row("candidates evaluated", candidates_evaluated));
                    rows.push(row("max |cov_term|", max_abs_cov));
                    false
                }
            };
            let mut result = serde_json::to_value(&outcome)?;
            result["source"] = json!("search");
            (result, found)
        }
    };
    Ok(Outcome {
        result,
        table: rows,
        exit: if found { 0 } else { EXIT_NOT_FOUND },
    })
}

struct Resolved {
    estimator: Box<dyn BlackBox>,
    design: DesignMatrix,
    hansen: Option<gmlab_core::refuter::HansenTilde>,
    note: Option<String>,
}

fn hansen(design: DesignMatrix, i: usize, j: usize, a: Option<&[f64]>) -> anyhow::Result<Resolved> {
    let a = match a {
        Some(a) => DVector::from_column_slice(a),
        None => DVector::from_element(design.k(), 1.0),
    };
    let est = hansen_tilde(&design, i, j, a)?;
    let note = est
        .coincides_with_ols()
        .then(|| "coincides with OLS".to_string());
    Ok(Resolved {
        estimator: Box::new(est.clone()),
        design,
        hansen: Some(est),
        note,
    })
}

fn quadratic_from_file(path: &Path) -> anyhow::Result<(QuadraticEstimator, Option<DesignMatrix>)> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let cx = value
        .pointer("/result/counterexample")
        .or_else(|| value.get("estimator").map(|_| &value));
    match cx {
        Some(cx) => {
            let est = serde_json::from_value(cx["estimator"].clone())
                .with_context(|| format!("parsing estimator in {}", path.display()))?;
            let design = serde_json::from_value(cx["design"].clone()).ok();
            Ok((est, design))
        }
        None => {
            let est = serde_json::from_value(value)
                .with_context(|| format!("parsing estimator in {}", path.display()))?;
            Ok((est, None))
        }
    }
}

fn resolve(args: &RefuteArgs) -> anyhow::Result<Resolved> {
    let explicit = args.design.as_deref().map(load_design).transpose()?;
    let default_design = |explicit: Option<DesignMatrix>| -> anyhow::Result<DesignMatrix> {
        Ok(match explicit {
            Some(d) => d,
            None => DesignMatrix::location(args.n)?,
        })
    };
    let spec = match (&args.estimator, args.builtin) {
        (Some(s), _) => s.clone(),
        (None, Some(Builtin::Ex1 | Builtin::Ex2)) => {
            let cx = if args.builtin == Some(Builtin::Ex1) {
                example_ex1(args.n, 1.5)?
            } else {
                example_ex2_with(&SkewedTwoPoint::new(1.0, gmlab_core::lab::DEFAULT_SKEW_P)?)?
            };
            return Ok(Resolved {
                estimator: Box::new(cx.estimator),
                design: cx.design,
                hansen: None,
                note: None,
            });
        }
        (None, Some(Builtin::HansenTilde)) => {
            let rows = args.rows.as_deref().unwrap_or(&[0, 1]);
            if rows.len() != 2 {
                bail!("--rows takes two indices, got {}", rows.len());
            }
            return hansen(
                default_design(explicit)?,
                rows[0],
                rows[1],
                args.a.as_deref(),
            );
        }
        (None, Some(b)) => format!("builtin:{}", name(b)),
        (None, None) => bail!("one of --estimator or --builtin is required"),
    };

    if let Some(path) = spec.strip_prefix("file:") {
        let (est, embedded) = quadratic_from_file(Path::new(path))?;
        let design = match (explicit, embedded) {
            (Some(d), _) | (None, Some(d)) => d,
            (None, None) => DesignMatrix::location(est.n())?,
        };
        if est.n() != design.n() || est.k() != design.k() {
            bail!(
                "estimator is {}x{} but the design is {}x{}",
                est.k(),
                est.n(),
                design.k(),
                design.n()
            );
        }
        return Ok(Resolved {
            estimator: Box::new(est),
            design,
            hansen: None,
            note: None,
        });
    }
    let design = default_design(explicit)?;
    match spec.as_str() {
        "builtin:ols" => Ok(Resolved {
            estimator: Box::new(LinearEstimator::ols(&design)),
            design,
            hansen: None,
            note: None,
        }),
        "builtin:gls" => {
            let n = design.n();
            let shape = match &args.sigma {
                Some(p) => read_matrix_with_shape(p, Some(n), Some(n))
                    .with_context(|| format!("reading covariance {}", p.display()))?,
                None => DMatrix::identity(n, n),
            };
            let cov = CovarianceSpec::new(1.0, shape)?;
            Ok(Resolved {
                estimator: Box::new(LinearEstimator::gls(&design, &cov)?),
                design,
                hansen: None,
                note: None,
            })
        }
        other => {
            let rest = other
                .strip_prefix("builtin:hansen-tilde:")
                .ok_or_else(|| anyhow!("unknown estimator spec {other:?}"))?;
            let (i, j) = rest
                .split_once(',')
                .and_then(|(i, j)| Some((i.trim().parse().ok()?, j.trim().parse().ok()?)))
                .ok_or_else(|| anyhow!("expected builtin:hansen-tilde:i,j, got {other:?}"))?;
            hansen(design, i, j, args.a.as_deref())
        }
    }
}

pub fn refute(args: &RefuteArgs, seed: u64) -> anyhow::Result<Outcome> {
    let Resolved {
        estimator,
        design,
        hansen,
        note,
    } = resolve(args)?;
    let outcome =
        refute_f2_unbiasedness_with_tol(estimator.as_ref(), &design, args.budget, seed, args.tol)?;
    let independent = match &hansen {
        Some(h) if design.n() <= FSTAR_MAX_N => {
            Some(check_fstar_unbiasedness(h, args.budget, seed)?.independent)
        }
        _ => None,
    };
    let mut rows = vec![
        row("estimator", estimator.label()),
        row("design", format!("{}x{}", design.n(), design.k())),
    ];
    match &outcome {
        RefutationOutcome::Pass { probes_checked } => {
            rows.push(row("verdict", "pass"));
            rows.push(row("probes checked", probes_checked));
        }
        RefutationOutcome::Refutation(r) => {
            rows.push(row("verdict", "refutation"));
            rows.push(row("attempt", r.attempt));
            rows.push(row("probe", &r.probe_kind));
            rows.push(row("support points", r.probe.len()));
            rows.push(row("beta", format!("{:?}", r.beta.as_slice())));
            rows.push(row("E estimate", format!("{:?}", r.expectation.as_slice())));
            rows.push(row("|E estimate - beta|", r.norm));
        }
    }
    if let Some(ind) = &independent {
        rows.push(row(
            "independent coordinates",
            if ind.is_pass() { "unbiased" } else { "biased" },
        ));
    }
    if let Some(note) = &note {
        rows.push(row("note", note));
    }
    let exit = if outcome.is_pass() { 0 } else { EXIT_REFUTED };
    let result = json!({
        "estimator": estimator.label(),
        "outcome": outcome,
        "independent_coordinates": independent,
        "note": note,
    });
    Ok(Outcome {
        result,
        table: rows,
        exit,
    })
}

pub fn simulate(args: &SimulateArgs, seed: u64) -> anyhow::Result<Outcome> {
    let path = &args.report;
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let cx_value = value
        .pointer("/result/counterexample")
        .cloned()
        .unwrap_or(value);
    let mut cx: Counterexample = serde_json::from_value(cx_value)
        .with_context(|| format!("{} does not hold a counterexample", path.display()))?;
    let sim = simulate_variances(&cx.estimator, cx.c(), &cx.law, args.reps, seed)?;
    let r = &cx.report;
    let checks = json!({
        "var_ols_within_4se": sim.var_ols.within(r.var_ols, 4.0),
        "var_alpha_within_4se": sim.var_alpha.within(r.var_alpha_star, 4.0),
        "improvement_within_4se": sim.improvement.within(r.var_ols - r.var_alpha_star, 4.0),
    });
    cx.report.mc_confirmation = Some(sim);
    let mut rows = Vec::new();
    report_rows(&cx, &mut rows);
    for key in [
        "var_ols_within_4se",
        "var_alpha_within_4se",
        "improvement_within_4se",
    ] {
        rows.push(row(key, &checks[key]));
    }
    Ok(Outcome {
        result: json!({ "counterexample": cx, "checks": checks }),
        table: rows,
        exit: 0,
    })
}
