//! Port manager against a plain reference model: the lowest index not held
//! by any live entry, one entry per (session, app).

use std::collections::BTreeMap;

use edgepod_core::ports::{IndexStoreConfig, PortError, PortManager};
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Op {
    Alloc { app: u8, session: u8 },
    Release { app: u8, index: u32 },
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => (0u8..3, 0u8..6).prop_map(|(app, session)| Op::Alloc { app, session }),
        2 => (0u8..3, 0u32..8).prop_map(|(app, index)| Op::Release { app, index }),
    ]
}

const APPS: [&str; 3] = ["gnuradio", "oai", "matlab"];

proptest! {
    #[test]
    fn matches_reference(ops in prop::collection::vec(op(), 1..80)) {
        let config = IndexStoreConfig { remote_base: 2200, web_base: 6080, max_index: 6 };
        let pm = PortManager::new(config).unwrap();
        // index -> (app, session)
        let mut model: BTreeMap<u32, (u8, u8)> = BTreeMap::new();
        for op in ops {
            match op {
                Op::Alloc { app, session } => {
                    let got = pm.allocate(APPS[app as usize], &format!("s{session}"), 0);
                    if model.values().any(|&(a, s)| a == app && s == session) {
                        let is_dup = matches!(got, Err(PortError::AlreadyAllocated { .. }));
                        prop_assert!(is_dup);
                        continue;
                    }
                    match (0..config.max_index).find(|i| !model.contains_key(i)) {
                        Some(index) => {
                            let alloc = got.unwrap();
                            prop_assert_eq!(alloc.assignment.index, index);
                            prop_assert_eq!(alloc.assignment.remote_port, 2200 + index as u16);
                            prop_assert_eq!(alloc.assignment.web_port, 6080 + index as u16);
                            prop_assert_eq!(alloc.key, format!("{}-{index}", APPS[app as usize]));
                            model.insert(index, (app, session));
                        }
                        None => {
                            let exhausted = matches!(got, Err(PortError::Exhausted { .. }));
                            prop_assert!(exhausted);
                        }
                    }
                }
                Op::Release { app, index } => {
                    pm.release(&format!("{}-{index}", APPS[app as usize])).unwrap();
                    if model.get(&index).is_some_and(|&(a, _)| a == app) {
                        model.remove(&index);
                    }
                }
            }
            let entries = pm.entries().unwrap();
            prop_assert_eq!(entries.len(), model.len());
            let mut remote: Vec<u16> = entries.iter().map(|e| e.remote_port).collect();
            remote.dedup();
            prop_assert_eq!(remote.len(), entries.len());
        }
    }
}
