# Uplift Engine Services
