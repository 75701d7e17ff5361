//! Deterministic synthetic multi-intent queries over the bundled
//! mobile-intents ontology.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::DatasetRecord;
use crate::ontology::{Ontology, OntologyError};

/// Paraphrases per leaf intent of `fixtures/mobile_intents.json`.
pub const PHRASES: &[(&str, &[&str])] = &[
    ("BookFlight", &["book a flight to lisbon", "i need a plane ticket to the airport in rome", "book me a flight to berlin"]),
    ("BookTrain", &["buy a train ticket to york", "get me a rail journey ticket by train", "i want a train ticket for tomorrow"]),
    ("BookBus", &["buy a bus ticket for the coach trip", "i need a coach ticket on the bus", "bus ticket to the city please"]),
    ("BookConcert", &["get a concert ticket for the band", "i want to see the singer live in concert", "concert tickets for friday"]),
    ("BookMovie", &["get a movie ticket at the cinema", "i want to watch a film at the cinema", "movie ticket for the new film"]),
    ("BookMuseum", &["get a museum pass for the gallery", "i want to visit the exhibition at the museum", "museum pass for two"]),
    ("RestaurantOrder", &["order pizza from the restaurant", "order sushi for dinner", "get burgers from a restaurant"]),
    ("GroceryDelivery", &["deliver groceries like milk and bread", "i need vegetables and milk delivered", "grocery delivery for this week"]),
    ("MealKit", &["subscribe to a weekly meal kit", "i want a meal kit with recipes", "sign me up for meal kit recipes"]),
    ("OrderTracking", &["track my last order", "where is my order and when it arrives", "track the order i placed"]),
    ("CancelOrder", &["cancel the order i placed by mistake", "cancel my order", "please cancel that order"]),
    ("RequestRefund", &["i want a refund for my purchase", "ask for my money back", "request a refund on the purchase"]),
    ("BookHotel", &["reserve a hotel room for the night", "book a hotel room", "i need a hotel reservation for two nights"]),
    ("BookResort", &["stay at a beach resort with a spa", "book a resort stay by the beach", "find a spa resort"]),
    ("RentApartment", &["rent an apartment for the holiday", "i need a holiday flat", "apartment rental near the centre"]),
    ("BookTour", &["join a guided tour of the city sights", "book a guided tour", "i want a tour of the sights"]),
    ("RentCar", &["rent a car to drive around", "i need a car rental", "hire a car for the week"]),
    ("BuyInsurance", &["buy travel insurance for the trip", "i need travel insurance cover", "get insurance cover for my trip"]),
    ("SearchProduct", &["search the shop for shoes", "find a phone in the shop", "search for a product like a phone"]),
    ("ComparePrices", &["compare prices to find the cheapest deal", "find the cheapest price", "compare prices for this"]),
    ("ReadReviews", &["read customer reviews of the item", "show me ratings and reviews", "read product reviews"]),
    ("AddToCart", &["add the item to my shopping cart", "put this in my cart", "add it to the cart"]),
    ("ApplyCoupon", &["apply a coupon code", "use my discount code", "apply the discount coupon"]),
    ("UpdatePayment", &["change my card", "update my payment method", "switch the card on my payment method"]),
];

const CONNECTORS: &[&str] = &[" and ", " and also ", ", then ", " plus "];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub records: usize,
    pub seed: u64,
    /// Probability that a record carries two intents instead of one.
    pub multi_rate: f64,
    pub id_prefix: &'static str,
}

impl SynthConfig {
    pub fn eval() -> Self {
        SynthConfig { records: 200, seed: 20240, multi_rate: 0.5, id_prefix: "eval" }
    }

    pub fn train() -> Self {
        SynthConfig { records: 400, seed: 71117, multi_rate: 0.5, id_prefix: "train" }
    }
}

pub fn generate(o: &Ontology, cfg: &SynthConfig) -> Result<Vec<DatasetRecord>, OntologyError> {
    for (id, _) in PHRASES {
        o.node(id)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.records);
    for i in 0..cfg.records {
        let n = if rng.random_bool(cfg.multi_rate) { 2 } else { 1 };
        let picked: Vec<&(&str, &[&str])> = PHRASES.choose_multiple(&mut rng, n).collect();
        let mut query = String::new();
        for (j, (_, phrases)) in picked.iter().enumerate() {
            if j > 0 {
                query.push_str(CONNECTORS.choose(&mut rng).expect("non-empty"));
            }
            query.push_str(phrases.choose(&mut rng).expect("non-empty"));
        }
        let mut gold: Vec<String> = picked.iter().map(|(id, _)| id.to_string()).collect();
        gold.sort();
        out.push(DatasetRecord {
            id: format!("{}{:04}", cfg.id_prefix, i),
            query,
            gold_intents: gold,
            gold_slots: Vec::new(),
        });
    }
    Ok(out)
}
