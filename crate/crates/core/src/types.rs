//! Identifier newtypes shared across the ledger, contracts, and actors.

use serde::{Deserialize, Serialize};
use std::fmt;

macro_rules! id_type {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                Self(s.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }
    };
}

id_type!(
    /// Ledger account. Owners, the broker, the consumer, and contracts all
    /// settle against accounts.
    AccountId
);

id_type!(
    /// Deployed contract instance, assigned by the ledger at deploy time.
    ContractId
);

id_type!(
    /// Network host. One actor per host; enclaves are pinned to the host that
    /// loaded them.
    HostId
);
