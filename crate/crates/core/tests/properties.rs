use std::collections::BTreeMap;

use num_rational::Ratio;
use proptest::prelude::*;

use meterlora::airtime::{time_on_air, DataRate, RadioParams, FRAME_OVERHEAD};
use meterlora::codec::{self, Fragment, MeterDatagram, MeterType, Reassembler, Reassembly};
use meterlora::link::{self, Environment, Obstacles, Position};
use meterlora::mac::{DevEui, Session};
use meterlora::planner::{self, CapacityInputs, DailyMethod};
use meterlora::regulation::{wait_after, ChannelPlan, DutyCycle, DutyLedger, DutyMode};
use meterlora::server::{GatewayRecord, NetworkServer};
use meterlora::sim::Transmission;
use meterlora::Micros;

fn data_rate() -> impl Strategy<Value = DataRate> {
    (0u8..=5).prop_map(|d| DataRate::new(d).unwrap())
}

fn datagram() -> impl Strategy<Value = MeterDatagram> {
    (
        any::<u64>(),
        any::<u32>(),
        any::<u32>(),
        1u8..=3,
        any::<u8>(),
        prop::array::uniform19(any::<i32>()),
    )
        .prop_map(|(meter_id, datagram_seq, timestamp, t, status_flags, readings)| MeterDatagram {
            meter_id,
            datagram_seq,
            timestamp,
            meter_type: MeterType::try_from(t).unwrap(),
            status_flags,
            readings,
        })
}

proptest! {
    #[test]
    fn frame_is_payload_plus_13(dr in data_rate(), len_seed in any::<usize>(), confirmed in any::<bool>()) {
        let len = len_seed % (dr.max_app_payload() + 1);
        let mut s = Session::abp_from_eui(DevEui::from_u64(7));
        let f = s.build_uplink(1, &vec![0xa5; len], confirmed, dr).unwrap();
        prop_assert_eq!(f.len(), len + FRAME_OVERHEAD);
    }

    #[test]
    fn toa_strictly_increases_with_sf(len in 0usize..=255) {
        for sf in 7..12u8 {
            let a = time_on_air(&RadioParams::with_sf(sf), len).unwrap();
            let b = time_on_air(&RadioParams::with_sf(sf + 1), len).unwrap();
            prop_assert!(b > a);
        }
    }

    #[test]
    fn toa_steps_by_whole_blocks(sf in 7u8..=12, len in 0usize..255) {
        let p = RadioParams::with_sf(sf);
        let a = time_on_air(&p, len).unwrap();
        let b = time_on_air(&p, len + 1).unwrap();
        let sym = p.symbol_duration().0;
        let step = b.0 - a.0;
        prop_assert!(step == 0 || step == sym * u64::from(p.cr_denominator));
    }

    #[test]
    fn wait_plus_toa_is_toa_over_duty(toa_us in 1u64..10_000_000, ppm in 1u32..=1_000_000) {
        let d = DutyCycle::from_ppm(ppm).unwrap();
        let exact = meterlora::regulation::wait_after_exact(Micros(toa_us), d);
        let toa = Ratio::from_integer(u128::from(toa_us));
        prop_assert_eq!(exact + toa, toa / d.as_ratio());
        // Integer form rounds the exact value up.
        let w = wait_after(Micros(toa_us), d).0;
        prop_assert!(Ratio::from_integer(u128::from(w)) >= exact);
        prop_assert!(Ratio::from_integer(u128::from(w)) < exact + 1);
    }

    #[test]
    fn try_reserve_is_monotone(
        history in prop::collection::vec((0u64..600_000_000, 1_000u64..3_000_000, 0usize..4), 0..12),
        t1 in 0u64..900_000_000,
        dt in 0u64..300_000_000,
        toa in 1_000u64..3_000_000,
    ) {
        let plan = ChannelPlan::eu868();
        let freqs = [868_100_000, 868_300_000, 867_100_000, 869_525_000];
        let mut l = DutyLedger::with_window(DutyMode::PerSubBand, Micros::from_secs(600));
        let mut history = history;
        history.sort();
        for (t, a, c) in history {
            let _ = l.try_reserve(plan.get(freqs[c]).unwrap(), Micros(t), Micros(a));
        }
        let ch = plan.get(868_500_000).unwrap();
        let r1 = l.earliest_start(ch, Micros(t1), Micros(toa)).unwrap();
        let r2 = l.earliest_start(ch, Micros(t1 + dt), Micros(toa)).unwrap();
        prop_assert!(r1 <= r2);
        prop_assert!(r1 >= Micros(t1));
    }

    #[test]
    fn ledger_replay_is_sound(
        requests in prop::collection::vec((0u64..20_000_000, 1_000u64..400_000, 0usize..5), 1..80),
        per_channel in any::<bool>(),
    ) {
        let plan = ChannelPlan::eu868();
        let freqs = [868_100_000, 868_300_000, 868_850_000, 867_300_000, 869_525_000];
        let mode = if per_channel { DutyMode::PerChannel } else { DutyMode::PerSubBand };
        let window = Micros::from_secs(120);
        let mut l = DutyLedger::with_window(mode, window);
        let mut t = Micros::ZERO;
        let mut accepted: BTreeMap<String, Vec<(Micros, Micros, DutyCycle)>> = BTreeMap::new();
        for (gap, toa, c) in requests {
            t += Micros(gap);
            let ch = plan.get(freqs[c]).unwrap();
            if let Ok(start) = l.try_reserve(ch, t, Micros(toa)) {
                accepted.entry(l.key(ch)).or_default().push((start, Micros(toa), ch.duty_cycle));
            }
        }
        for txs in accepted.values_mut() {
            txs.sort();
            for (i, &(s, _, d)) in txs.iter().enumerate() {
                // Every window ending at a start stays within budget.
                let used: u64 = txs
                    .iter()
                    .filter(|&&(o, _, _)| o <= s && o + window > s)
                    .map(|&(_, a, _)| a.0)
                    .sum();
                prop_assert!(used <= d.budget(window).0, "window at {s} uses {used}");
                if i > 0 {
                    let (ps, pa, _) = txs[i - 1];
                    prop_assert!(s >= ps + pa + wait_after(pa, d));
                }
            }
        }
    }

    #[test]
    fn collide_is_symmetric_and_irreflexive(
        a in (0u64..5, 0usize..3, 7u8..=12, 0u64..2_000_000, 1u64..2_000_000),
        b in (0u64..5, 0usize..3, 7u8..=12, 0u64..2_000_000, 1u64..2_000_000),
    ) {
        let freqs = [868_100_000, 868_300_000, 868_500_000];
        let mk = |(id, c, sf, s, d): (u64, usize, u8, u64, u64)| Transmission {
            id,
            source: 0,
            channel_hz: freqs[c],
            sf,
            start: Micros(s),
            toa: Micros(d),
            tx_power_dbm: 14.0,
            frame: Vec::new(),
        };
        let (x, y) = (mk(a), mk(b));
        prop_assert_eq!(link::collide(&x, &y), link::collide(&y, &x));
        prop_assert!(!link::collide(&x, &x));
    }

    #[test]
    fn rssi_sf_invariant_and_additive(loss_q in 160i32..640, p_q in -40i32..56, g in -20i32..=26) {
        // Quarter-dB steps are exact in binary floating point.
        let (loss, p) = (f64::from(loss_q) / 4.0, f64::from(p_q) / 4.0);
        let gain = link::effective_antenna_gain(g).unwrap();
        let base = link::rssi(p, gain, 0.0, loss);
        prop_assert_eq!(link::rssi(p + 5.0, gain, 0.0, loss), base + 5.0);
        prop_assert!(link::snr(base, 125_000, 6.0).reported_db <= 12.5);
    }

    #[test]
    fn antenna_gain_peaks_at_three(g in -128i32..=127) {
        let here = link::effective_antenna_gain(g).unwrap();
        if g != 3 {
            prop_assert!(here < link::effective_antenna_gain(3).unwrap());
        }
        let mirror = 6 - g;
        if (-128..=127).contains(&mirror) {
            prop_assert_eq!(here, link::effective_antenna_gain(mirror).unwrap());
        }
    }

    #[test]
    fn success_probability_falls_with_distance(d in 1.0f64..2000.0, extra in 0.0f64..500.0, sf in 7u8..=12) {
        let env = Environment { shadowing_sigma_db: 0.0, ..Environment::outdoor() };
        let p = |d: f64| {
            let pl = link::path_loss(&env, &Position::default(), &Position::new(d, 0.0, 0.0), &Obstacles::default()).unwrap();
            let rssi = link::rssi(14.0, 3.0, 0.0, pl);
            link::success_probability(rssi, link::snr(rssi, 125_000, 6.0).true_db, sf)
        };
        prop_assert!(p(d + extra) <= p(d));
        if sf < 12 {
            let env_p = |sf: u8| {
                let pl = link::path_loss(&env, &Position::default(), &Position::new(d, 0.0, 0.0), &Obstacles::default()).unwrap();
                let rssi = link::rssi(14.0, 3.0, 0.0, pl);
                link::success_probability(rssi, link::snr(rssi, 125_000, 6.0).true_db, sf)
            };
            prop_assert!(env_p(sf + 1) >= env_p(sf));
        }
    }

    #[test]
    fn capacity_scales_exactly(ch in 1u64..16, r in 0u64..5_000, er in 0u64..5_000, k in 1u64..8) {
        prop_assume!(r + er > 0);
        let exact = |ch: u64, r: u64, er: u64| Ratio::new(u128::from(ch) * 43_200, u128::from(r + 2 * er));
        prop_assert_eq!(exact(ch * k, r, er), exact(ch, r, er) * u128::from(k));
        prop_assert_eq!(exact(ch, r * k, er * k), exact(ch, r, er) / u128::from(k));
        let n = planner::node_capacity(CapacityInputs::new(ch, r, er)).unwrap();
        prop_assert_eq!(u128::from(n), exact(ch, r, er).to_integer());
    }

    #[test]
    fn daily_table_monotone(ppm in 1u32..=1_000_000) {
        let d = DutyCycle::from_ppm(ppm).unwrap();
        let rows = planner::daily_data_table(d, DailyMethod::Airtime);
        prop_assert!(rows.windows(2).all(|w| w[0].bytes_per_day <= w[1].bytes_per_day));
    }

    #[test]
    fn dedup_is_idempotent(count in 1usize..12, repeats in 1usize..4, gateways in 1u32..4) {
        let mut srv = NetworkServer::new(ChannelPlan::eu868());
        let mut s = Session::abp_from_eui(DevEui::from_u64(0xabc));
        srv.register_session(s.clone());
        let mut accepted = 0;
        for k in 0..count {
            let f = s.build_uplink(1, &[k as u8; 8], false, DataRate::DR5).unwrap();
            for _ in 0..repeats {
                for g in 0..gateways {
                    let rec = GatewayRecord {
                        gateway_id: g,
                        receive_time: Micros::from_secs(10 * k as u64),
                        frequency_hz: 868_100_000,
                        sf: 7,
                        rssi_dbm: -90,
                        snr_db: 7.0,
                        crc_ok: true,
                        frame: f.to_bytes(),
                    };
                    if matches!(srv.ingest(&rec), meterlora::server::IngestOutcome::Accepted { .. }) {
                        accepted += 1;
                    }
                }
            }
        }
        prop_assert_eq!(accepted, count);
        let c = srv.counts();
        prop_assert_eq!(c.accepted + c.duplicates + c.rejected, c.ingested);
        prop_assert_eq!(c.ingested as usize, count * repeats * gateways as usize);
        prop_assert_eq!(srv.log().len(), count * repeats * gateways as usize);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn fragmentation_round_trip(d in datagram(), reverse in any::<bool>()) {
        let bytes = d.encode();
        prop_assert_eq!(MeterDatagram::decode(&bytes).unwrap(), d);
        let mut frags = codec::fragment(&bytes).unwrap().to_vec();
        if reverse {
            frags.reverse();
        }
        let mut r = Reassembler::new(codec::DEFAULT_REASSEMBLY_TIMEOUT);
        let wire: Vec<Fragment> = frags.iter().map(|f| Fragment::parse(&f.to_bytes()).unwrap()).collect();
        prop_assert_eq!(r.push(1, &wire[0], Micros::ZERO).unwrap(), Reassembly::Pending);
        prop_assert_eq!(r.push(1, &wire[1], Micros(1)).unwrap(), Reassembly::Complete(bytes));
    }
}

proptest! {
    #[test]
    fn interleaved_sources_reassemble(
        ds in prop::collection::vec(datagram(), 1..8)
            .prop_flat_map(|ds| {
                let n = ds.len();
                let order: Vec<usize> = (0..2 * n).collect();
                (Just(ds), Just(order).prop_shuffle())
            })
    ) {
        let (ds, order) = ds;
        let frags: Vec<(u64, Fragment)> = ds
            .iter()
            .enumerate()
            .flat_map(|(i, d)| codec::fragment(&d.encode()).unwrap().map(|f| (i as u64, f)))
            .collect();
        let mut r = Reassembler::new(codec::DEFAULT_REASSEMBLY_TIMEOUT);
        let mut done = BTreeMap::new();
        for (t, &k) in order.iter().enumerate() {
            let (src, f) = &frags[k];
            if let Reassembly::Complete(b) = r.push(*src, f, Micros(t as u64)).unwrap() {
                done.insert(*src, b);
            }
        }
        prop_assert_eq!(done.len(), ds.len());
        for (i, d) in ds.iter().enumerate() {
            prop_assert_eq!(MeterDatagram::decode(&done[&(i as u64)]).unwrap(), *d);
        }
        prop_assert_eq!(r.pending(), 0);
    }
}
