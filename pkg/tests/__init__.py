# Tests for ABMT package
