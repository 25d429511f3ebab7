# Tests for kde-drift-lab
