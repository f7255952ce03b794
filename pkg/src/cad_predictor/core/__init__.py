"""Cross-cutting helpers: exceptions, logging and seeded random streams."""
