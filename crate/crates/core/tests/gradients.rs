use csiforge::chansim::{generate_dataset, ChannelMatrix, GenOptions, SimConfig};
use csiforge::codec::{Codec, CodecConfig, GROUPS};
use csiforge::diffcore::{ParamStore, Session};
use csiforge::fusion::SensorGrid;
use csiforge::trainer::normalized_loss_op;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Loss of the unquantized fused path: features go straight to the decoder.
fn smooth_loss(
    codec: &Codec,
    store: &ParamStore,
    hs: &[&ChannelMatrix],
    grids: &[&SensorGrid],
) -> (f64, Vec<Option<csiforge::diffcore::Tensor>>) {
    let mut s = Session::training(store, &GROUPS);
    let target = codec.net.target(hs).unwrap();
    let z = codec.g_features(&mut s, hs).unwrap();
    let d = codec.g_sensor(&mut s, grids).unwrap();
    let pred = codec.g_decode(&mut s, z, Some(d), hs.len()).unwrap();
    let l = normalized_loss_op(&mut s.graph, pred, &target).unwrap();
    let value = s.graph.value(l).item().unwrap();
    (value, s.param_grads(l).unwrap())
}

#[test]
fn random_parameters_match_central_differences() {
    let ds = generate_dataset(
        &SimConfig::desk(),
        &GenOptions {
            count: 2,
            uplink: true,
            seed: 11,
            ..Default::default()
        },
    )
    .unwrap();
    let (codec, mut store) = Codec::new(&CodecConfig::desk_fused(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // a nonzero fold so refiner internals receive gradient
    let w_r = codec.refiner.as_ref().unwrap().w_r;
    store
        .get_mut(w_r)
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = rng.random_range(-0.3..0.3));
    let hs: Vec<&ChannelMatrix> = ds.samples.iter().map(|s| &s.downlink).collect();
    let grids: Vec<SensorGrid> = ds
        .samples
        .iter()
        .map(|s| SensorGrid::from_uplink(s.uplink.as_ref().unwrap(), (2, 8)))
        .collect();
    let grid_refs: Vec<&SensorGrid> = grids.iter().collect();
    let (_, grads) = smooth_loss(&codec, &store, &hs, &grid_refs);

    let ids: Vec<_> = store.ids().filter(|&id| store.entry(id).group != "quantizer").collect();
    let mut checked = 0;
    let mut groups_seen = std::collections::BTreeSet::new();
    while checked < 24 {
        let id = ids[rng.random_range(0..ids.len())];
        let j = rng.random_range(0..store.get(id).len());
        let analytic = grads[id.index()].as_ref().map_or(0.0, |g| g.data()[j]);
        let h = 1e-6;
        let orig = store.get(id).data()[j];
        store.get_mut(id).data_mut()[j] = orig + h;
        let (up, _) = smooth_loss(&codec, &store, &hs, &grid_refs);
        store.get_mut(id).data_mut()[j] = orig - h;
        let (down, _) = smooth_loss(&codec, &store, &hs, &grid_refs);
        store.get_mut(id).data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs());
        if scale < 1e-7 {
            continue;
        }
        let rel = (analytic - numeric).abs() / scale;
        let name = &store.entry(id).name;
        assert!(
            rel <= 1e-3,
            "{name}[{j}]: analytic {analytic:e}, numeric {numeric:e}, rel {rel:e}"
        );
        groups_seen.insert(store.entry(id).group.clone());
        checked += 1;
    }
    assert!(groups_seen.len() >= 3, "{groups_seen:?}");
}
