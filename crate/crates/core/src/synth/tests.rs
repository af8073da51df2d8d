use super::*;
use crate::config::KvConfig;

fn small_cfg() -> ScenarioConfig {
    ScenarioConfig {
        n_sites: 10,
        days: 14,
        ..ScenarioConfig::default()
    }
}

#[test]
fn default_start_is_feb_first() {
    assert_eq!(
        crate::graph_data::io::hour_to_timestamp(ScenarioConfig::default().start),
        "2024-02-01T00:00:00Z"
    );
}

#[test]
fn deployment_layout() {
    let cells = generate_deployment(&small_cfg());
    assert_eq!(cells.len(), 60);
    let sectors: BTreeSet<_> = cells.iter().map(|c| c.sector_id.clone()).collect();
    assert_eq!(sectors.len(), 30);
    for s in &sectors {
        assert_eq!(cells.iter().filter(|c| &c.sector_id == s).count(), 2);
    }
    for c in &cells {
        let site: Vec<_> = cells.iter().filter(|o| o.site_id == c.site_id).collect();
        assert!(site.iter().all(|o| o.x == c.x && o.y == c.y));
        assert_eq!(c.attrs.iter().filter(|a| **a == 1).count(), 2);
    }
}

#[test]
fn full_scale_deployment_size() {
    let cfg = ScenarioConfig {
        n_sites: 1300,
        ..ScenarioConfig::default()
    };
    assert_eq!(generate_deployment(&cfg).len(), 7800);
}

#[test]
fn generation_is_deterministic() {
    let cfg = small_cfg();
    let a = generate_scenario(&cfg).unwrap();
    let b = generate_scenario(&cfg).unwrap();
    assert_eq!(a.deployment, b.deployment);
    assert_eq!(a.telemetry.len(), b.telemetry.len());
    for (x, y) in a.telemetry.iter().zip(&b.telemetry) {
        assert_eq!(x.mask, y.mask);
        assert!(x.values.iter().zip(&y.values).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    let other = generate_deployment(&ScenarioConfig {
        rng_seed: 8,
        ..small_cfg()
    });
    assert_ne!(other, a.deployment);
}

#[test]
fn values_stay_in_range() {
    let cfg = ScenarioConfig {
        base_load: 80.0,
        noise_std: 10.0,
        ..small_cfg()
    };
    let tel = generate_traffic(&generate_deployment(&cfg), &cfg);
    assert!(tel.iter().flat_map(|s| &s.values).all(|v| (0.0..=100.0).contains(v)));
}

#[test]
fn co_located_cells_match_without_noise() {
    let cfg = ScenarioConfig {
        noise_std: 0.0,
        base_spread: 0.0,
        missing_frac: 0.0,
        ..small_cfg()
    };
    let dep = generate_deployment(&cfg);
    // Cells 0 and 1 of a site share position and band.
    assert_eq!(dep[0].site_id, dep[1].site_id);
    assert_eq!(dep[0].attr_indices().unwrap().1, dep[1].attr_indices().unwrap().1);
    let tel = generate_traffic(&dep[..2], &cfg);
    assert_eq!(tel[0].values, tel[1].values);
}

#[test]
fn weekend_factor_scales_mean() {
    let cfg = ScenarioConfig {
        noise_std: 0.5,
        regional_var: 0.0,
        missing_frac: 0.0,
        base_load: 20.0,
        days: 28,
        ..small_cfg()
    };
    let dep = generate_deployment(&cfg);
    let tel = generate_traffic(&dep, &cfg);
    let (mut we, mut wd) = ((0.0, 0usize), (0.0, 0usize));
    for s in &tel {
        for (i, v) in s.values.iter().enumerate() {
            let slot = if is_weekend(s.start + i as Hour) {
                &mut we
            } else {
                &mut wd
            };
            slot.0 += v;
            slot.1 += 1;
        }
    }
    let ratio = (we.0 / we.1 as f64) / (wd.0 / wd.1 as f64);
    assert!((ratio - 0.7).abs() < 0.02, "weekend/weekday ratio {ratio}");
}

#[test]
fn missingness_concentrates() {
    let cfg = ScenarioConfig {
        n_sites: 4,
        days: 90,
        missing_frac: 0.1,
        ..ScenarioConfig::default()
    };
    let tel = generate_traffic(&generate_deployment(&cfg), &cfg);
    // 2160 Bernoulli(0.1) draws: sd ~ 0.0065.
    let fracs: Vec<f64> = tel.iter().map(KpiSeries::missing_fraction).collect();
    let within = fracs.iter().filter(|f| (**f - 0.1).abs() <= 0.01).count();
    assert!(within as f64 >= 0.8 * fracs.len() as f64, "{fracs:?}");
    let mean = fracs.iter().sum::<f64>() / fracs.len() as f64;
    assert!((mean - 0.1).abs() < 0.01);
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn nearby_cells_correlate_more() {
    let cfg = ScenarioConfig {
        n_sites: 60,
        area_w_m: 10_000.0,
        area_h_m: 10_000.0,
        noise_std: 0.2,
        days: 7,
        ..ScenarioConfig::default()
    };
    let dep = generate_deployment(&cfg);
    let tel = generate_traffic(&dep, &cfg);
    let ctx = 0..168;
    let (mut near, mut far) = (Vec::new(), Vec::new());
    for i in 0..dep.len() {
        for j in i + 1..dep.len() {
            if dep[i].site_id == dep[j].site_id {
                continue;
            }
            let d = dep[i].distance(&dep[j]);
            let r = pearson(&tel[i].values[ctx.clone()], &tel[j].values[ctx.clone()]);
            if d < 500.0 {
                near.push(r);
            } else if d > 3000.0 {
                far.push(r);
            }
        }
    }
    assert!(!near.is_empty() && !far.is_empty());
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(mean(&near) > mean(&far), "near {} far {}", mean(&near), mean(&far));
}

fn fixture() -> (Vec<CellMeta>, Vec<KpiSeries>) {
    let cfg = ScenarioConfig {
        missing_frac: 0.0,
        ..small_cfg()
    };
    let dep = generate_deployment(&cfg);
    let tel = generate_traffic(&dep, &cfg);
    (dep, tel)
}

#[test]
fn class1_changes_only_target() {
    let (dep, tel) = fixture();
    let mut injected = tel.clone();
    let target = dep[0].cell_id.clone();
    let lo = tel[0].start + 100;
    let spec = InjectionSpec::Class1 {
        cell: target.clone(),
        window: (lo, lo + 7),
        magnitude: Magnitude::Additive(30.0),
    };
    let labels = inject(&mut injected, &dep, &spec).unwrap();
    assert_eq!(labels.len(), 8);
    assert!(labels.iter().all(|l| l.is_anomalous && l.cell_id == target));
    for (before, after) in tel.iter().zip(&injected) {
        let changed: Vec<Hour> = (0..before.len())
            .filter(|&i| before.values[i] != after.values[i])
            .map(|i| before.start + i as Hour)
            .collect();
        if before.cell_id == target {
            assert_eq!(changed, (lo..=lo + 7).collect::<Vec<_>>());
        } else {
            assert!(changed.is_empty());
        }
    }
}

#[test]
fn class2_off_state() {
    let (dep, tel) = fixture();
    let mut injected = tel.clone();
    let i = tel
        .iter()
        .position(|s| s.values[..200].iter().sum::<f64>() / 200.0 > 10.0)
        .unwrap();
    let lo = tel[i].start + 200;
    let spec = InjectionSpec::Class2 {
        cell: tel[i].cell_id.clone(),
        window: (lo, lo + 23),
        mode: Class2Mode::Off,
    };
    let labels = inject(&mut injected, &dep, &spec).unwrap();
    assert!(injected[i].values[200..224].iter().all(|v| *v < 1.0));
    for l in &labels {
        let j = (l.hour - tel[i].start) as usize;
        assert_ne!(tel[i].values[j], injected[i].values[j]);
    }
}

#[test]
fn mobility_event_scales_area_without_anomalous_labels() {
    let (dep, tel) = fixture();
    let mut injected = tel.clone();
    let centre = (dep[0].x, dep[0].y);
    let area = cells_in_area(&dep, centre, 1500.0);
    let lo = tel[0].start + 24 * 5 + 15;
    let window = (lo, lo + 8);
    let spec = InjectionSpec::Mobility {
        center: centre,
        radius_m: 1500.0,
        window,
        peak_factor: 2.5,
    };
    let labels = inject(&mut injected, &dep, &spec).unwrap();
    assert!(labels.iter().all(|l| !l.is_anomalous && l.kind == LabelKind::Mobility));
    assert_eq!(labels.len(), area.len() * 9);
    for (before, after) in tel.iter().zip(&injected) {
        let inside = area.contains(&before.cell_id);
        for h in 0..before.len() {
            let hour = before.start + h as Hour;
            let in_window = (window.0..=window.1).contains(&hour);
            if !(inside && in_window) {
                assert_eq!(before.values[h], after.values[h]);
            } else if before.values[h] > 1.0 && before.values[h] < 35.0 {
                let f = mobility_profile(hour, window, 2.5);
                assert!((after.values[h] - before.values[h] * f).abs() <= 0.006);
            }
        }
    }
    assert!((mobility_profile(lo + 4, window, 2.5) - 2.5).abs() < 1e-12);
}

#[test]
fn inject_unknown_cell_fails() {
    let (dep, mut tel) = fixture();
    let spec = InjectionSpec::Class1 {
        cell: "nope".into(),
        window: (tel[0].start, tel[0].start + 1),
        magnitude: Magnitude::Relative(0.5),
    };
    assert!(matches!(inject(&mut tel, &dep, &spec), Err(Error::UnknownCell(_))));
}

#[test]
fn planned_injections_respect_constraints() {
    let cfg = ScenarioConfig {
        n_sites: 30,
        days: 30,
        n_class1: 5,
        n_class2: 3,
        mobility_events: 1,
        ..ScenarioConfig::default()
    };
    let sc = generate_scenario(&cfg).unwrap();
    let earliest = cfg.start + 14 * 24;
    let mut sectors = BTreeSet::new();
    let mut area = BTreeSet::new();
    for spec in &sc.injections {
        assert!(spec.window().0 >= earliest);
        match spec {
            InjectionSpec::Mobility { center, radius_m, .. } => {
                area.extend(cells_in_area(&sc.deployment, *center, *radius_m));
            }
            InjectionSpec::Class1 { cell, .. } | InjectionSpec::Class2 { cell, .. } => {
                assert_eq!(sc.splits.of(cell), Some(Split::Test));
                let meta = sc.deployment.iter().find(|c| &c.cell_id == cell).unwrap();
                assert!(sectors.insert(meta.sector_id.clone()));
            }
        }
    }
    assert!(!area.is_empty());
    for spec in &sc.injections {
        if let InjectionSpec::Class1 { cell, .. } | InjectionSpec::Class2 { cell, .. } = spec {
            assert!(!area.contains(cell));
        }
    }
    let windows = label_windows(&sc.labels);
    assert!(windows.iter().any(|w| w.1 == LabelKind::Class1));
}

#[test]
fn config_file_parses_injections() {
    let text = "n_sites = 3\ndays = 20\n\
                inject = class1 cell=S0000-1 start=300 hours=8 magnitude=0.5\n\
                inject = class2 cell=S0001-0 start=2024-02-15T00:00:00Z hours=24 mode=flapping\n\
                inject = mobility x=10 y=20 radius=500 start=320 hours=9\n";
    let cfg = ScenarioConfig::from_kv(&KvConfig::parse(text).unwrap()).unwrap();
    assert_eq!(cfg.injections.len(), 3);
    assert_eq!(cfg.injections[0].window(), (cfg.start + 300, cfg.start + 307));
    match &cfg.injections[2] {
        InjectionSpec::Mobility { peak_factor, .. } => assert_eq!(*peak_factor, 2.5),
        other => panic!("{other:?}"),
    }
}

#[test]
fn config_rejects_unknown_key_with_line() {
    let err = ScenarioConfig::from_kv(&KvConfig::parse("days = 3\nwidth = 4\n").unwrap()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("width") && msg.contains("line 2"), "{msg}");
}

#[test]
fn config_rejects_out_of_range_window() {
    let text = "days = 2\ninject = class1 cell=x start=40 hours=10 magnitude=0.5\n";
    assert!(ScenarioConfig::from_kv(&KvConfig::parse(text).unwrap()).is_err());
}

#[test]
fn labels_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("labels.csv");
    let labels = vec![
        GroundTruthLabel {
            cell_id: "a".into(),
            hour: 474_100,
            is_anomalous: true,
            kind: LabelKind::Class1,
        },
        GroundTruthLabel {
            cell_id: "b".into(),
            hour: 474_101,
            is_anomalous: false,
            kind: LabelKind::Mobility,
        },
    ];
    write_labels(&path, &labels).unwrap();
    assert_eq!(read_labels(&path).unwrap(), labels);
}
