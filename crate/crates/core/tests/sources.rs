use std::path::Path;

use vipsim::config::load_topology_file;
use vipsim::topology::{assign_sources, Catalog};

#[test]
fn sources_are_uniform_over_geant_nodes() {
    let topo = load_topology_file(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/geant.topo")).unwrap();
    let n = topo.num_nodes();
    assert_eq!(n, 22);
    let cat = Catalog { object_count: 3000, object_size: 1.0, chunks_per_object: 1 };
    let seeds = 10u64;
    let expected = cat.object_count as f64 / n as f64;
    let mut pooled = vec![0u64; n];
    let mut chi2 = 0.0;
    for seed in 0..seeds {
        let src = assign_sources(&topo, &cat, seed);
        assert_eq!(src, assign_sources(&topo, &cat, seed));
        let mut counts = vec![0u64; n];
        src.iter().for_each(|&s| counts[s] += 1);
        chi2 += counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum::<f64>();
        pooled.iter_mut().zip(&counts).for_each(|(p, c)| *p += c);
    }
    // sum of 10 independent chi-square(21) statistics is chi-square(210)
    let df = (seeds * (n as u64 - 1)) as f64;
    assert!(chi2 < df + 3.0 * (2.0 * df).sqrt(), "chi2 {chi2} over {df} degrees of freedom");

    let total = seeds as f64 * cat.object_count as f64;
    let p = 1.0 / n as f64;
    let sigma = (total * p * (1.0 - p)).sqrt();
    for (node, &c) in pooled.iter().enumerate() {
        assert!((c as f64 - total * p).abs() <= 3.0 * sigma, "node {node}: {c} vs {}", total * p);
    }
}
