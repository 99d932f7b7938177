"""Command-line interface of matlrt."""
