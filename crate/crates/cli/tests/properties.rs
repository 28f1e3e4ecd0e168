use proptest::prelude::*;

use hvdbg_cli::parse_keys;
use hvdbg_cli::protocol::{parse_client, ClientMsg, ServerMsg};

proptest! {
    #[test]
    fn key_schedule_round_trips(keys in prop::collection::vec((any::<u64>(), any::<u8>()), 0..12), hex in any::<bool>()) {
        let text = keys
            .iter()
            .map(|(at, c)| if hex { format!("{at}:{c:#x}") } else { format!("{at}:{c}") })
            .collect::<Vec<_>>()
            .join(",");
        prop_assert_eq!(parse_keys(&text).unwrap(), keys);
    }

    #[test]
    fn client_messages_round_trip(code in any::<u8>(), s in ".{0,30}") {
        for msg in [ClientMsg::Key { code }, ClientMsg::Cmd { s: s.clone() }] {
            let line = serde_json::to_string(&msg).unwrap();
            prop_assert!(!line.contains('\n'));
            prop_assert_eq!(parse_client(&line).unwrap(), msg);
        }
    }

    #[test]
    fn server_lines_are_single_line(s in ".{0,60}", seq in any::<u64>(), fb in prop::collection::vec(any::<u8>(), 0..64)) {
        for msg in [ServerMsg::Out { s: s.clone() }, ServerMsg::Err { s: s.clone() }, ServerMsg::frame(seq, &fb)] {
            let line = msg.to_line();
            prop_assert!(!line.contains('\n'));
            prop_assert_eq!(serde_json::from_str::<ServerMsg>(&line).unwrap(), msg);
        }
    }

    #[test]
    fn junk_is_rejected_not_panicking(line in ".{0,80}") {
        let _ = parse_client(&line);
    }
}
