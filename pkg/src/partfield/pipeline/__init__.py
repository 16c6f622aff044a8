"""Dataset generation, IO, CLI, and the HTTP service."""
