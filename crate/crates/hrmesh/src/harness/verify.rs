//! Built-in invariant suites behind the `verify` subcommand.
//!
//! These are quick, self-contained checks of the load-bearing guarantees:
//! refinement conformity, relocation validity, autodiff soundness, reward
//! diffusion, and solver convergence. Each prints one pass/fail line; the
//! caller turns failures into a nonzero exit code.

use crate::features::build_state;
use crate::fem::Field;
use crate::mesh::{generate_domain, rgb_refine, uniform_refine, BoundaryClass, DomainKind};
use crate::policy::{Policy, PolicyConfig};
use crate::Result;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct VerifyReport {
    pub passed: usize,
    pub failed: usize,
}

fn check(name: &str, ok: bool, detail: &str, report: &mut VerifyReport) {
    if ok {
        println!("PASS {name}");
        report.passed += 1;
    } else {
        println!("FAIL {name}: {detail}");
        report.failed += 1;
    }
}

/// Runs every suite; `sweeps` scales the randomized case counts.
pub fn run_verification(seed: u64, sweeps: usize) -> Result<VerifyReport> {
    let mut report = VerifyReport { passed: 0, failed: 0 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Refinement conformity under random flags.
    {
        let mut bad = String::new();
        'outer: for case in 0..sweeps {
            let kind = match case % 3 {
                0 => DomainKind::UnitSquare,
                1 => DomainKind::LShape { p0: [rng.gen_range(0.25..0.9), rng.gen_range(0.25..0.9)] },
                _ => DomainKind::ConvexPolygon { seed: rng.gen() },
            };
            let mesh = match generate_domain(&kind, rng.gen_range(8..30), rng.gen()) {
                Ok(m) => m,
                Err(e) => {
                    bad = format!("case {case}: generation failed: {e}");
                    break 'outer;
                }
            };
            let flags: Vec<u8> = (0..mesh.n_elements()).map(|_| rng.gen_range(0..2)).collect();
            let (fine, maps) = match rgb_refine(&mesh, &flags) {
                Ok(r) => r,
                Err(e) => {
                    bad = format!("case {case}: refinement failed: {e}");
                    break 'outer;
                }
            };
            if !fine.is_conforming() {
                bad = format!("case {case}: hanging nodes");
                break;
            }
            if !fine.detect_tangled().is_empty() {
                bad = format!("case {case}: inverted children");
                break;
            }
            for (parent, children) in maps.elem_children.iter().enumerate() {
                let sum: f64 = children.iter().map(|&c| fine.area(c)).sum();
                let want = mesh.area(parent);
                if (sum - want).abs() > 1e-12 * want.abs().max(1e-30) {
                    bad = format!("case {case}: area mismatch on parent {parent}");
                    break 'outer;
                }
            }
        }
        check("rgb-conformity", bad.is_empty(), &bad, &mut report);
    }

    // Relocation validity: randomized policies never tangle the mean mesh.
    {
        let mut bad = String::new();
        for case in 0..sweeps {
            let kind = if case % 2 == 0 {
                DomainKind::LShape { p0: [rng.gen_range(0.25..0.9), rng.gen_range(0.25..0.9)] }
            } else {
                DomainKind::ConvexPolygon { seed: rng.gen() }
            };
            let mesh = generate_domain(&kind, rng.gen_range(10..30), rng.gen())?;
            let field = Field {
                values: mesh.coords.iter().map(|p| (4.0 * p[0]).sin() * (3.0 * p[1]).cos()).collect(),
            };
            let state = build_state(&mesh, &field, 0, 0.001, &[])?;
            let policy = Policy::new(PolicyConfig {
                latent: 8,
                ..PolicyConfig::new(state.vertex_feats.cols, state.elem_feats.cols)
            });
            let store = policy.init_params(&mut rng);
            let out = policy.forward_eval(&store, &state, &mesh)?;
            let moved = mesh.with_coords(out.vertex_mean.clone());
            if !moved.detect_tangled().is_empty() {
                bad = format!("case {case}: tangled mean mesh");
                break;
            }
            let corners_fixed = (0..mesh.n_vertices()).all(|v| {
                !matches!(mesh.boundary_class[v], BoundaryClass::Corner)
                    || out.vertex_mean[v] == mesh.coords[v]
            });
            if !corners_fixed {
                bad = format!("case {case}: corner moved");
                break;
            }
        }
        check("relocation-validity", bad.is_empty(), &bad, &mut report);
    }

    // Autodiff spot checks against central finite differences.
    {
        use crate::tensor::Tape;
        let mut bad = String::new();
        for case in 0..sweeps.min(20) {
            let n = rng.gen_range(2..5);
            let m = rng.gen_range(2..5);
            let data: Vec<f64> = (0..n * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..m * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let eval = |d: &[f64]| -> f64 {
                let mut t = Tape::new();
                let x = t.variable((n, m), d.to_vec());
                let wv = t.constant((m, 3), w.clone());
                let h = t.matmul(x, wv);
                let h = t.tanh(h);
                let s = t.softmax_rows(h);
                let o = t.sum(s);
                t.value(o)
            };
            let mut t = Tape::new();
            let x = t.variable((n, m), data.clone());
            let wv = t.constant((m, 3), w.clone());
            let h = t.matmul(x, wv);
            let h = t.tanh(h);
            let s = t.softmax_rows(h);
            let o = t.sum(s);
            let grads = t.backward(o)?;
            let g = grads.get(x).unwrap();
            let step = 1e-5;
            for k in 0..data.len() {
                let mut up = data.clone();
                up[k] += step;
                let mut dn = data.clone();
                dn[k] -= step;
                let fd = (eval(&up) - eval(&dn)) / (2.0 * step);
                let denom = fd.abs().max(g[k].abs()).max(1e-6);
                if (fd - g[k]).abs() / denom > 1e-4 {
                    bad = format!("case {case} entry {k}: {} vs fd {fd}", g[k]);
                    break;
                }
            }
            if !bad.is_empty() {
                break;
            }
        }
        check("autodiff-fd", bad.is_empty(), &bad, &mut report);
    }

    // Reward diffusion against a dense oracle.
    {
        let mesh = generate_domain(&DomainKind::UnitSquare, 24, 0)?;
        let adjacency = mesh.vertex_adjacency();
        let n = adjacency.len();
        let delta: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = crate::env::pagerank_diffuse(&delta, &adjacency, 0.5, 20);
        let mut r = delta.clone();
        for _ in 0..20 {
            let mut nxt = vec![0.0; n];
            for i in 0..n {
                let mut acc = 0.0;
                for &j in &adjacency[i] {
                    acc += r[j] / adjacency[i].len() as f64;
                }
                nxt[i] = 0.5 * delta[i] + 0.5 * acc;
            }
            r = nxt;
        }
        let worst = got.iter().zip(&r).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
        check(
            "pagerank-oracle",
            worst <= 1e-12,
            &format!("max deviation {worst:.3e}"),
            &mut report,
        );
    }

    // FEM convergence on the manufactured Poisson solution.
    {
        let ratios = manufactured_convergence_ratios()?;
        let ok = ratios.iter().all(|r| (3.5..=4.5).contains(r));
        check(
            "fem-convergence",
            ok,
            &format!("ratios {ratios:?} outside [3.5, 4.5]"),
            &mut report,
        );
    }

    Ok(report)
}

/// L2-error ratios between successive uniform refinements for the
/// manufactured solution `sin(pi x) sin(pi y)`.
pub fn manufactured_convergence_ratios() -> Result<Vec<f64>> {
    let pi = std::f64::consts::PI;
    let base = generate_domain(&DomainKind::UnitSquare, 2, 0)?;
    let mut errors = Vec::new();
    for k in 2..5 {
        let m = uniform_refine(&base, k)?;
        let f = crate::fem::solve_with_load(&m, |p| {
            2.0 * pi * pi * (pi * p[0]).sin() * (pi * p[1]).sin()
        })?;
        let mut err2 = 0.0;
        for e in 0..m.n_elements() {
            let t = m.tris[e];
            let area = m.area(e);
            for kk in 0..3 {
                let (i, j) = (t[kk], t[(kk + 1) % 3]);
                let mid = [
                    0.5 * (m.coords[i][0] + m.coords[j][0]),
                    0.5 * (m.coords[i][1] + m.coords[j][1]),
                ];
                let uh = 0.5 * (f.values[i] + f.values[j]);
                let exact = (pi * mid[0]).sin() * (pi * mid[1]).sin();
                err2 += area / 3.0 * (uh - exact).powi(2);
            }
        }
        errors.push(err2.sqrt());
    }
    Ok(errors.windows(2).map(|w| w[0] / w[1]).collect())
}
