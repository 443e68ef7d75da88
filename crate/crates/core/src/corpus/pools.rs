//! Value pools for synthetic identities.

pub const FIRST_NAMES: [&str; 30] = [
    "Hiroko", "Amara", "Liam", "Sofia", "Mateo", "Chloe", "Kenji", "Priya", "Lucas", "Elena",
    "Omar", "Ingrid", "Tomas", "Yuki", "Nadia", "Felix", "Aisha", "Bruno", "Clara", "Diego",
    "Emil", "Freya", "Hugo", "Iris", "Jonas", "Keiko", "Leon", "Mira", "Nico", "Olga",
];

pub const LAST_NAMES: [&str; 30] = [
    "Sasaki", "Okafor", "Novak", "Rossi", "Garcia", "Dubois", "Tanaka", "Sharma", "Becker",
    "Petrov", "Haddad", "Larsen", "Silva", "Kimura", "Moreau", "Fischer", "Mensah", "Costa",
    "Lindqvist", "Alvarez", "Nakamura", "Weber", "Kowalski", "Santos", "Berg", "Ivanova",
    "Castillo", "Yamamoto", "Horvat", "Duarte",
];

pub const EMAIL_DOMAINS: [&str; 5] = [
    "outlook.org",
    "mail.com",
    "inbox.net",
    "post.org",
    "webmail.com",
];

/// Number of distinct full names the pools can produce.
pub const NAME_POOL: usize = FIRST_NAMES.len() * LAST_NAMES.len();
