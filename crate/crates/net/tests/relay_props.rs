//! Relay transparency for arbitrary payloads up to 1 MiB.

mod common;

use common::*;
use edgepod_net::{DisplayServer, GatewayConfig, TargetSlot, TunnelClient, TunnelGateway};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn bytes_out_equal_bytes_in(
        seed in any::<u64>(),
        len in prop_oneof![0usize..4096, 4096usize..=(1 << 20)],
    ) {
        let rt = tokio::runtime::Runtime::new().unwrap();
        let echoed = rt.block_on(async {
            let gw = TunnelGateway::start(GatewayConfig::default()).await.unwrap();
            let port = free_port();
            let display = DisplayServer::start("p").await.unwrap();
            let _client = TunnelClient::connect(gw.control_addr(), "p", port, TargetSlot::new(Some(display.addr())))
                .await
                .unwrap();
            let mut state = seed | 1;
            let payload: Vec<u8> = (0..len)
                .map(|_| {
                    state ^= state << 13;
                    state ^= state >> 7;
                    state ^= state << 17;
                    state as u8
                })
                .collect();
            // an HTTP-looking prefix would switch the stub into banner mode
            let payload = if payload.starts_with(b"GET ") || payload.starts_with(b"HEAD ") {
                payload[1..].to_vec()
            } else {
                payload
            };
            (round_trip(port, &payload).await.unwrap(), payload)
        });
        prop_assert_eq!(echoed.0.len(), echoed.1.len());
        prop_assert!(echoed.0 == echoed.1);
    }
}
