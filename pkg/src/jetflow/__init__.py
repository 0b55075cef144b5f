"""Jet schemes for SDEs on manifolds."""
