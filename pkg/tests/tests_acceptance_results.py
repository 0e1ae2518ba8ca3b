"""Shared store for acceptance lines so the session summary can print them."""

RESULTS = {}


def lines():
    return [RESULTS[k] for k in sorted(RESULTS)]
