# Scripts package: charts and the documentation gate
